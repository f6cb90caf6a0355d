//! CSV ingestion of raw EHR rows and the versioned artifact formats.
//!
//! Raw input: `subject_id,stay_id,time,<feature...>[,label][,los_days]`,
//! empty cell = missing. Artifacts written by this crate start with a
//! `# caat-<kind> v<version>` comment line.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::schema::{format_number, DatasetSchema, FeatureKind};
use super::{DataError, Dataset, EhrSample};
use crate::tensor::Tensor;

pub const ARTIFACT_VERSION: u32 = 1;

/// First line of every artifact file, optionally with `key=value` attributes.
pub fn artifact_header(kind: &str, attrs: &[(&str, String)]) -> String {
    let mut line = format!("# caat-{kind} v{ARTIFACT_VERSION}");
    for (k, v) in attrs {
        line.push_str(&format!(" {k}={v}"));
    }
    line
}

/// Checks the header line of an artifact and returns its attributes and
/// the CSV body that follows.
pub fn read_artifact<'t>(
    text: &'t str,
    kind: &str,
) -> Result<(BTreeMap<String, String>, &'t str), DataError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let mut tokens = first.trim().split_whitespace();
    let want = format!("caat-{kind}");
    let version = format!("v{ARTIFACT_VERSION}");
    if tokens.next() != Some("#") || tokens.next() != Some(want.as_str()) {
        return Err(DataError::Format(format!(
            "expected a `# {want} {version}` header line, found `{}`",
            first.trim()
        )));
    }
    match tokens.next() {
        Some(v) if v == version => {}
        other => {
            return Err(DataError::Format(format!(
                "{want}: unsupported version {}",
                other.unwrap_or("(none)")
            )))
        }
    }
    let mut attrs = BTreeMap::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("bad header attribute `{t}`")))?;
        attrs.insert(k.to_string(), v.to_string());
    }
    Ok((attrs, rest))
}

fn parse_cell(raw: &str, line: usize, column: &str) -> Result<Option<f64>, DataError> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(DataError::Parse {
            line,
            column: column.into(),
            value: raw.into(),
        }),
    }
}

fn parse_label(raw: &str, line: usize) -> Result<Option<u8>, DataError> {
    match raw.trim() {
        "" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        _ => Err(DataError::Parse {
            line,
            column: "label".into(),
            value: raw.into(),
        }),
    }
}

struct Row {
    time: f64,
    values: Vec<Option<f64>>,
    label: Option<u8>,
    los: Option<f64>,
}

/// Reads raw rows, groups them by stay and orders each stay by time.
pub fn read_raw_csv<R: Read>(reader: R, schema: &DatasetSchema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::None).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 3 || header[0] != "subject_id" || header[1] != "stay_id" || header[2] != "time" {
        return Err(DataError::Format(
            "header must start with subject_id,stay_id,time".into(),
        ));
    }
    let mut feature_col = vec![None; schema.features.len()];
    let (mut label_col, mut los_col) = (None, None);
    for (i, name) in header.iter().enumerate().skip(3) {
        match name.as_str() {
            "label" => label_col = Some(i),
            "los_days" => los_col = Some(i),
            _ => match schema.features.iter().position(|f| &f.name == name) {
                Some(fi) if feature_col[fi].is_none() => feature_col[fi] = Some(i),
                Some(_) => return Err(DataError::Format(format!("column `{name}` appears twice"))),
                None => return Err(DataError::UnknownColumn(name.clone())),
            },
        }
    }
    if let Some(fi) = feature_col.iter().position(Option::is_none) {
        return Err(DataError::MissingColumn(schema.features[fi].name.clone()));
    }
    let feature_col: Vec<usize> = feature_col.into_iter().map(Option::unwrap).collect();

    let mut order: Vec<String> = Vec::new();
    let mut stays: HashMap<String, (String, Vec<(usize, Row)>)> = HashMap::new();
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = ri + 2;
        let subject = rec.get(0).unwrap_or("").trim().to_string();
        let stay = rec.get(1).unwrap_or("").trim().to_string();
        if subject.is_empty() || stay.is_empty() {
            return Err(DataError::Parse {
                line,
                column: if subject.is_empty() { "subject_id" } else { "stay_id" }.into(),
                value: String::new(),
            });
        }
        let time = parse_cell(rec.get(2).unwrap_or(""), line, "time")?.ok_or(DataError::Parse {
            line,
            column: "time".into(),
            value: String::new(),
        })?;
        let mut values = Vec::with_capacity(schema.features.len());
        for (f, &ci) in schema.features.iter().zip(&feature_col) {
            let raw = rec.get(ci).unwrap_or("");
            let v = match f.kind {
                FeatureKind::Continuous => parse_cell(raw, line, &f.name)?,
                FeatureKind::Categorical => {
                    let s = raw.trim();
                    if s.is_empty() {
                        None
                    } else {
                        Some(f.level_of(s).ok_or_else(|| DataError::Parse {
                            line,
                            column: f.name.clone(),
                            value: raw.into(),
                        })? as f64)
                    }
                }
            };
            values.push(v);
        }
        let label = match label_col {
            Some(c) => parse_label(rec.get(c).unwrap_or(""), line)?,
            None => None,
        };
        let los = match los_col {
            Some(c) => parse_cell(rec.get(c).unwrap_or(""), line, "los_days")?,
            None => None,
        };
        let entry = stays.entry(stay.clone()).or_insert_with(|| {
            order.push(stay.clone());
            (subject.clone(), Vec::new())
        });
        if entry.0 != subject {
            return Err(DataError::SubjectMismatch {
                stay_id: stay,
                first: entry.0.clone(),
                other: subject,
            });
        }
        entry.1.push((
            line,
            Row {
                time,
                values,
                label,
                los,
            },
        ));
    }

    let slots = schema.slots();
    let columns = schema.raw_columns();
    let widths = [columns[0].len(), columns[1].len()];
    let mut samples = Vec::with_capacity(order.len());
    for stay in order {
        let (subject, mut rows) = stays.remove(&stay).expect("stay recorded");
        rows.sort_by(|a, b| a.1.time.total_cmp(&b.1.time));
        for w in rows.windows(2) {
            if w[0].1.time == w[1].1.time {
                return Err(DataError::DuplicateTime {
                    stay_id: stay,
                    time: w[0].1.time,
                    line: w[1].0,
                });
            }
        }
        let t = rows.len();
        let mut mats = [vec![f64::NAN; t * widths[0]], vec![f64::NAN; t * widths[1]]];
        let mut obs = [vec![false; t * widths[0]], vec![false; t * widths[1]]];
        let (mut label, mut los) = (None, None);
        for (r, (_, row)) in rows.iter().enumerate() {
            for (v, slot) in row.values.iter().zip(&slots) {
                if let Some(v) = v {
                    let k = r * widths[slot.modality] + slot.column;
                    mats[slot.modality][k] = *v;
                    obs[slot.modality][k] = true;
                }
            }
            label = row.label.or(label);
            los = row.los.or(los);
        }
        let [d1, d2] = mats;
        let [o1, o2] = obs;
        samples.push(EhrSample {
            subject_id: subject,
            stay_id: stay,
            times: rows.iter().map(|(_, r)| r.time).collect(),
            m1: Tensor::new(&[t, widths[0]], d1)?,
            m2: Tensor::new(&[t, widths[1]], d2)?,
            observed1: o1,
            observed2: o2,
            label,
            los_days: los,
        });
    }
    Ok(Dataset::new(columns, samples))
}

pub fn ingest_csv(path: &Path, schema: &DatasetSchema) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path)?;
    read_raw_csv(std::io::BufReader::new(f), schema)
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format_number(v)
    }
}

/// Writes a raw-layout dataset in the input CSV format (categorical values
/// as domain labels). The label is repeated on every row of a stay.
pub fn write_raw_csv<W: Write>(writer: W, data: &Dataset, schema: &DatasetSchema) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "stay_id".into(), "time".into()];
    header.extend(schema.features.iter().map(|f| f.name.clone()));
    let with_label = data.samples.iter().any(|s| s.label.is_some());
    let with_los = data.samples.iter().any(|s| s.los_days.is_some());
    if with_label {
        header.push("label".into());
    }
    if with_los {
        header.push("los_days".into());
    }
    w.write_record(&header)?;
    let slots = schema.slots();
    for s in &data.samples {
        for r in 0..s.time_points() {
            let mut rec = vec![s.subject_id.clone(), s.stay_id.clone(), format_number(s.times[r])];
            for (f, slot) in schema.features.iter().zip(&slots) {
                let v = s.modality(slot.modality).get(r, slot.column);
                rec.push(if v.is_nan() {
                    String::new()
                } else if f.is_categorical() {
                    f.domain[v as usize].clone()
                } else {
                    format_number(v)
                });
            }
            if with_label {
                rec.push(s.label.map(|l| l.to_string()).unwrap_or_default());
            }
            if with_los {
                rec.push(s.los_days.map(format_number).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

const PROCESSED: &str = "processed";

/// Writes a (typically preprocessed) dataset with modality-prefixed
/// columns: `subject_id,stay_id,time,label,los_days,m1:<col>…,m2:<col>…`.
pub fn write_processed<W: Write>(mut writer: W, data: &Dataset) -> Result<(), DataError> {
    writeln!(writer, "{}", artifact_header(PROCESSED, &[]))?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "subject_id".to_string(),
        "stay_id".into(),
        "time".into(),
        "label".into(),
        "los_days".into(),
    ];
    for (m, cols) in data.columns.iter().enumerate() {
        header.extend(cols.iter().map(|c| format!("m{}:{c}", m + 1)));
    }
    w.write_record(&header)?;
    for s in &data.samples {
        for r in 0..s.time_points() {
            let mut rec = vec![
                s.subject_id.clone(),
                s.stay_id.clone(),
                format_number(s.times[r]),
                s.label.map(|l| l.to_string()).unwrap_or_default(),
                s.los_days.map(format_number).unwrap_or_default(),
            ];
            rec.extend(s.m1.row(r).iter().map(|&v| cell(v)));
            rec.extend(s.m2.row(r).iter().map(|&v| cell(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_processed(text: &str) -> Result<Dataset, DataError> {
    let (_, body) = read_artifact(text, PROCESSED)?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let fixed = ["subject_id", "stay_id", "time", "label", "los_days"];
    if header.len() < fixed.len() || header[..fixed.len()] != fixed {
        return Err(DataError::Format(format!(
            "processed header must start with {}",
            fixed.join(",")
        )));
    }
    let mut columns: [Vec<String>; 2] = Default::default();
    for h in &header[fixed.len()..] {
        match h.split_once(':') {
            Some(("m1", name)) if columns[1].is_empty() => columns[0].push(name.into()),
            Some(("m2", name)) => columns[1].push(name.into()),
            _ => return Err(DataError::UnknownColumn(h.clone())),
        }
    }
    let (w1, w2) = (columns[0].len(), columns[1].len());
    let mut samples: Vec<EhrSample> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut buffers: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = ri + 3;
        let stay = rec.get(1).unwrap_or("").to_string();
        let subject = rec.get(0).unwrap_or("").to_string();
        let time = parse_cell(rec.get(2).unwrap_or(""), line, "time")?.unwrap_or(f64::NAN);
        let label = parse_label(rec.get(3).unwrap_or(""), line)?;
        let los = parse_cell(rec.get(4).unwrap_or(""), line, "los_days")?;
        let mut vals = Vec::with_capacity(w1 + w2);
        for (c, name) in header.iter().enumerate().skip(fixed.len()) {
            vals.push(parse_cell(rec.get(c).unwrap_or(""), line, name)?.unwrap_or(f64::NAN));
        }
        let i = *index.entry(stay.clone()).or_insert_with(|| {
            samples.push(EhrSample {
                subject_id: subject.clone(),
                stay_id: stay.clone(),
                times: Vec::new(),
                m1: Tensor::zeros(&[0, w1]),
                m2: Tensor::zeros(&[0, w2]),
                observed1: Vec::new(),
                observed2: Vec::new(),
                label,
                los_days: los,
            });
            buffers.push((Vec::new(), Vec::new()));
            samples.len() - 1
        });
        if samples[i].subject_id != subject {
            return Err(DataError::SubjectMismatch {
                stay_id: stay,
                first: samples[i].subject_id.clone(),
                other: subject,
            });
        }
        if samples[i].times.last().is_some_and(|&t| t >= time) {
            return Err(DataError::DuplicateTime {
                stay_id: stay,
                time,
                line,
            });
        }
        samples[i].times.push(time);
        buffers[i].0.extend_from_slice(&vals[..w1]);
        buffers[i].1.extend_from_slice(&vals[w1..]);
    }
    for (s, (b1, b2)) in samples.iter_mut().zip(buffers) {
        let t = s.times.len();
        s.observed1 = b1.iter().map(|v| !v.is_nan()).collect();
        s.observed2 = b2.iter().map(|v| !v.is_nan()).collect();
        s.m1 = Tensor::new(&[t, w1], b1)?;
        s.m2 = Tensor::new(&[t, w2], b2)?;
    }
    Ok(Dataset::new(columns, samples))
}

pub fn load_processed(path: &Path) -> Result<Dataset, DataError> {
    read_processed(&std::fs::read_to_string(path)?)
}
