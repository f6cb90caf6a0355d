//! The preprocessing pipeline: exclusion, imputation, trimming, one-hot
//! expansion and z-normalization.

use std::fmt;
use std::path::Path;

use super::csv_io::{artifact_header, read_artifact};
use super::schema::{DatasetSchema, FeatureKind, Imputation};
use super::split::{split_by_subject, SplitManifest, DOWNSTREAM_SET, EMBEDDING_SET};
use super::{DataError, Dataset, EhrSample};
use crate::tensor::Tensor;

/// Lower bound on the divisor of z-normalization.
pub const ZNORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExclusionReason {
    Short { time_points: usize },
    AllMissingFeature { feature: String },
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Short { .. } => f.write_str("short"),
            Self::AllMissingFeature { .. } => f.write_str("all-missing feature"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dropped {
    pub stay_id: String,
    pub subject_id: String,
    pub reason: ExclusionReason,
}

/// Drops stays that are too short or never observe some feature.
/// Expects the raw (pre one-hot) layout.
pub fn exclude_invalid(samples: Vec<EhrSample>, schema: &DatasetSchema) -> (Vec<EhrSample>, Vec<Dropped>) {
    let slots = schema.slots();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for s in samples {
        let t = s.time_points();
        let reason = if t < schema.min_time_points {
            Some(ExclusionReason::Short { time_points: t })
        } else {
            schema.features.iter().zip(&slots).find_map(|(f, slot)| {
                let obs = s.observed(slot.modality);
                let w = s.modality(slot.modality).cols();
                (!(0..t).any(|r| obs[r * w + slot.column])).then(|| ExclusionReason::AllMissingFeature {
                    feature: f.name.clone(),
                })
            })
        };
        match reason {
            Some(reason) => dropped.push(Dropped {
                stay_id: s.stay_id.clone(),
                subject_id: s.subject_id.clone(),
                reason,
            }),
            None => kept.push(s),
        }
    }
    (kept, dropped)
}

fn locf_where(
    sample: &EhrSample,
    schema: &DatasetSchema,
    include: impl Fn(FeatureKind) -> bool,
) -> Result<EhrSample, DataError> {
    let mut out = sample.clone();
    let t = sample.time_points();
    for (f, slot) in schema.features.iter().zip(schema.slots()) {
        if !include(f.kind) {
            continue;
        }
        let (m, _) = out.modality_mut(slot.modality);
        let w = m.cols();
        let data = m.data_mut();
        let mut last = None;
        for r in 0..t {
            let k = r * w + slot.column;
            if data[k].is_nan() {
                let fill = match last {
                    Some(v) => v,
                    None => f.normal_internal().ok_or_else(|| DataError::MissingNormal {
                        feature: f.name.clone(),
                        stay_id: sample.stay_id.clone(),
                    })?,
                };
                data[k] = fill;
            } else {
                last = Some(data[k]);
            }
        }
    }
    Ok(out)
}

/// Forward-fills every feature; positions before the first observation
/// take the schema's normal value. Observation masks are left untouched.
pub fn impute_locf(sample: &EhrSample, schema: &DatasetSchema) -> Result<EhrSample, DataError> {
    locf_where(sample, schema, |_| true)
}

/// k-nearest-neighbour imputation over a table of rows.
///
/// A missing cell `(i, j)` becomes the mean of column `j` over the `k`
/// nearest rows that observe `j`. Distance is Euclidean over the columns
/// observed in both rows; rows sharing no observed column are infinitely
/// far. Ties go to the lower row index. Fewer than `k` donors are all used.
pub fn impute_knn_rows(rows: &[Vec<Option<f64>>], k: usize) -> Result<Vec<Vec<f64>>, DataError> {
    if k == 0 {
        return Err(DataError::Invalid("knn k must be at least 1".into()));
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(DataError::Invalid("knn rows differ in width".into()));
    }
    let mut out: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
        .collect();
    for j in 0..width {
        let donors: Vec<usize> = (0..rows.len()).filter(|&i| rows[i][j].is_some()).collect();
        let needs = rows.iter().any(|r| r[j].is_none());
        if !needs {
            continue;
        }
        if donors.is_empty() {
            return Err(DataError::FeatureNeverObserved(format!("column {j}")));
        }
        for (i, row) in rows.iter().enumerate() {
            if row[j].is_some() {
                continue;
            }
            let mut ranked: Vec<(f64, usize)> = donors
                .iter()
                .map(|&d| {
                    let mut sum = 0.0;
                    let mut shared = false;
                    for (a, b) in row.iter().zip(&rows[d]) {
                        if let (Some(a), Some(b)) = (a, b) {
                            sum += (a - b) * (a - b);
                            shared = true;
                        }
                    }
                    (if shared { sum.sqrt() } else { f64::INFINITY }, d)
                })
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let take = k.min(ranked.len());
            out[i][j] = ranked[..take]
                .iter()
                .map(|&(_, d)| rows[d][j].expect("donor observes column"))
                .sum::<f64>()
                / take as f64;
        }
    }
    Ok(out)
}

/// KNN imputation of continuous features with visits pooled across all
/// given samples. Categorical features are forward-filled as in
/// [`impute_locf`].
pub fn impute_knn(samples: &[EhrSample], schema: &DatasetSchema, k: usize) -> Result<Vec<EhrSample>, DataError> {
    let cont: Vec<_> = schema
        .features
        .iter()
        .zip(schema.slots())
        .filter(|(f, _)| f.kind == FeatureKind::Continuous)
        .collect();
    let mut rows = Vec::new();
    for s in samples {
        for r in 0..s.time_points() {
            rows.push(
                cont.iter()
                    .map(|(_, slot)| {
                        let v = s.modality(slot.modality).get(r, slot.column);
                        (!v.is_nan()).then_some(v)
                    })
                    .collect::<Vec<_>>(),
            );
        }
    }
    let filled = impute_knn_rows(&rows, k).map_err(|e| match e {
        DataError::FeatureNeverObserved(c) => {
            let j: usize = c.trim_start_matches("column ").parse().unwrap_or(0);
            DataError::FeatureNeverObserved(cont[j].0.name.clone())
        }
        other => other,
    })?;
    let mut out = Vec::with_capacity(samples.len());
    let mut next = 0;
    for s in samples {
        let mut s2 = locf_where(s, schema, |k| k == FeatureKind::Categorical)?;
        for r in 0..s.time_points() {
            for ((_, slot), &v) in cont.iter().zip(&filled[next]) {
                let (m, _) = s2.modality_mut(slot.modality);
                m.set(r, slot.column, v);
            }
            next += 1;
        }
        out.push(s2);
    }
    Ok(out)
}

/// Expands categorical columns (domain indices) into one binary column per
/// domain level. Expects a fully imputed raw-layout sample.
pub fn one_hot_encode(sample: &EhrSample, schema: &DatasetSchema) -> Result<EhrSample, DataError> {
    let enc = schema.encoded_columns();
    let widths = [enc[0].len(), enc[1].len()];
    let t = sample.time_points();
    let mut data = [vec![0.0; t * widths[0]], vec![0.0; t * widths[1]]];
    let mut obs = [vec![false; t * widths[0]], vec![false; t * widths[1]]];
    let mut next = [0usize; 2];
    for (f, slot) in schema.features.iter().zip(schema.slots()) {
        let m = slot.modality;
        let src = sample.modality(m);
        let src_obs = sample.observed(m);
        let (sw, dw) = (src.cols(), widths[m]);
        let base = next[m];
        for r in 0..t {
            let v = src.get(r, slot.column);
            let seen = src_obs[r * sw + slot.column];
            if f.is_categorical() {
                let d = f.domain.len();
                if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < d) {
                    return Err(DataError::OutOfDomain {
                        feature: f.name.clone(),
                        value: v,
                        time_index: r,
                    });
                }
                data[m][r * dw + base + v as usize] = 1.0;
                for l in 0..d {
                    obs[m][r * dw + base + l] = seen;
                }
            } else {
                data[m][r * dw + base] = v;
                obs[m][r * dw + base] = seen;
            }
        }
        next[m] += if f.is_categorical() { f.domain.len() } else { 1 };
    }
    let [d1, d2] = data;
    let [o1, o2] = obs;
    Ok(EhrSample {
        m1: Tensor::new(&[t, widths[0]], d1)?,
        m2: Tensor::new(&[t, widths[1]], d2)?,
        observed1: o1,
        observed2: o2,
        ..sample.clone()
    })
}

/// Keeps the last `min(T, l)` time points.
pub fn trim_to_recent(sample: &EhrSample, l: usize) -> EhrSample {
    let t = sample.time_points();
    sample.slice_time(t.saturating_sub(l), t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStat {
    pub name: String,
    /// 0 for modality 1, 1 for modality 2.
    pub modality: usize,
    pub column: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Per-continuous-column statistics and the split they were fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub fitted_on: String,
    pub stats: Vec<NormStat>,
}

const NORM_KIND: &str = "normstats";

impl NormStats {
    /// Fits over all time points of `data`. `continuous[m][c]` marks which
    /// columns are normalized.
    pub fn fit(data: &Dataset, continuous: &[Vec<bool>; 2], fitted_on: &str) -> Result<Self, DataError> {
        if data.is_empty() {
            return Err(DataError::Invalid("cannot fit normalization on an empty split".into()));
        }
        let mut stats = Vec::new();
        for m in 0..2 {
            for (c, _) in continuous[m].iter().enumerate().filter(|(_, &is)| is) {
                let mut n = 0usize;
                let mut sum = 0.0;
                for s in &data.samples {
                    for r in 0..s.time_points() {
                        sum += s.modality(m).get(r, c);
                        n += 1;
                    }
                }
                let mean = sum / n as f64;
                let mut ss = 0.0;
                for s in &data.samples {
                    for r in 0..s.time_points() {
                        let d = s.modality(m).get(r, c) - mean;
                        ss += d * d;
                    }
                }
                stats.push(NormStat {
                    name: data.columns[m][c].clone(),
                    modality: m,
                    column: c,
                    mean,
                    std: (ss / n as f64).sqrt(),
                });
            }
        }
        Ok(Self {
            fitted_on: fitted_on.into(),
            stats,
        })
    }

    pub fn apply(&self, data: &mut Dataset) {
        for s in &mut data.samples {
            for st in &self.stats {
                let (m, _) = s.modality_mut(st.modality);
                let denom = st.std.max(ZNORM_EPS);
                for r in 0..m.rows() {
                    let v = m.get(r, st.column);
                    m.set(r, st.column, (v - st.mean) / denom);
                }
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = artifact_header(NORM_KIND, &[("fitted_on", self.fitted_on.clone())]);
        out.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "modality", "column", "mean", "std"]).expect("in-memory write");
        for s in &self.stats {
            w.write_record([
                s.name.clone(),
                (s.modality + 1).to_string(),
                s.column.to_string(),
                format!("{}", s.mean),
                format!("{}", s.std),
            ])
            .expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let (attrs, body) = read_artifact(text, NORM_KIND)?;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut stats = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |c: usize, name: &str| -> Result<f64, DataError> {
                rec[c].parse().map_err(|_| DataError::Parse {
                    line: i + 3,
                    column: name.into(),
                    value: rec[c].into(),
                })
            };
            stats.push(NormStat {
                name: rec[0].into(),
                modality: num(1, "modality")? as usize - 1,
                column: num(2, "column")? as usize,
                mean: num(3, "mean")?,
                std: num(4, "std")?,
            });
        }
        Ok(Self {
            fitted_on: attrs.get("fitted_on").cloned().unwrap_or_default(),
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn continuity(data: &Dataset, schema: &DatasetSchema) -> Result<[Vec<bool>; 2], DataError> {
    let enc = schema.encoded_columns();
    for m in 0..2 {
        let names: Vec<&str> = enc[m].iter().map(|c| c.name.as_str()).collect();
        if data.columns[m] != names {
            return Err(DataError::Schema(format!(
                "modality {} columns do not match the one-hot layout of the schema",
                m + 1
            )));
        }
    }
    Ok([
        enc[0].iter().map(|c| c.continuous).collect(),
        enc[1].iter().map(|c| c.continuous).collect(),
    ])
}

/// Fits z-normalization on `fit` and applies it to `fit` and every other
/// split. One-hot columns are left untouched.
pub fn fit_apply_znorm(
    fit: &mut Dataset,
    others: &mut [&mut Dataset],
    schema: &DatasetSchema,
    fitted_on: &str,
) -> Result<NormStats, DataError> {
    let cont = continuity(fit, schema)?;
    for o in others.iter() {
        continuity(o, schema)?;
    }
    let stats = NormStats::fit(fit, &cont, fitted_on)?;
    stats.apply(fit);
    for o in others.iter_mut() {
        stats.apply(o);
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub embedding: Dataset,
    pub downstream: Dataset,
    pub manifest: SplitManifest,
    pub norm: NormStats,
    pub dropped: Vec<Dropped>,
}

/// exclude → split by subject → impute (per set) → trim → one-hot →
/// z-normalize with statistics fitted on the embedding set.
pub fn run_pipeline(
    raw: Dataset,
    schema: &DatasetSchema,
    embedding_fraction: f64,
    seed: u64,
) -> Result<PipelineOutput, DataError> {
    schema.validate()?;
    let (kept, dropped) = exclude_invalid(raw.samples, schema);
    if kept.is_empty() {
        return Err(DataError::Invalid("every stay was excluded".into()));
    }
    let manifest = split_by_subject(
        &kept,
        &[(EMBEDDING_SET, embedding_fraction), (DOWNSTREAM_SET, 1.0 - embedding_fraction)],
        seed,
    )?;
    let enc = schema.encoded_columns();
    let columns = [
        enc[0].iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
        enc[1].iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
    ];
    let process = |set: &str| -> Result<Dataset, DataError> {
        let part: Vec<EhrSample> = kept
            .iter()
            .filter(|s| manifest.set_of(&s.stay_id) == Some(set))
            .cloned()
            .collect();
        let imputed = match schema.imputation {
            Imputation::Locf => part
                .iter()
                .map(|s| impute_locf(s, schema))
                .collect::<Result<Vec<_>, _>>()?,
            Imputation::Knn if part.is_empty() => part,
            Imputation::Knn => impute_knn(&part, schema, schema.knn_k)?,
        };
        let samples = imputed
            .iter()
            .map(|s| one_hot_encode(&trim_to_recent(s, schema.trim_length), schema))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset::new(columns.clone(), samples))
    };
    let mut embedding = process(EMBEDDING_SET)?;
    let mut downstream = process(DOWNSTREAM_SET)?;
    let norm = fit_apply_znorm(&mut embedding, &mut [&mut downstream], schema, EMBEDDING_SET)?;
    Ok(PipelineOutput {
        embedding,
        downstream,
        manifest,
        norm,
        dropped,
    })
}
