use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;

use super::csv_io::{artifact_header, read_artifact};
use super::{DataError, EhrSample};
use crate::rng;

pub const EMBEDDING_SET: &str = "embedding";
pub const DOWNSTREAM_SET: &str = "downstream";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitEntry {
    pub stay_id: String,
    pub subject_id: String,
    pub set: String,
    pub fold: Option<usize>,
}

/// Assignment of every stay to a named set (and optionally a fold).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub entries: Vec<SplitEntry>,
}

const KIND: &str = "manifest";

impl SplitManifest {
    pub fn stays_in(&self, set: &str) -> HashSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.set == set)
            .map(|e| e.stay_id.as_str())
            .collect()
    }

    pub fn set_of(&self, stay_id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.stay_id == stay_id)
            .map(|e| e.set.as_str())
    }

    /// Subjects whose stays land in more than one set.
    pub fn purity_violations(&self) -> Vec<String> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        let mut bad: Vec<String> = Vec::new();
        for e in &self.entries {
            match seen.get(e.subject_id.as_str()) {
                Some(&s) if s != e.set => {
                    if !bad.contains(&e.subject_id) {
                        bad.push(e.subject_id.clone());
                    }
                }
                Some(_) => {}
                None => {
                    seen.insert(&e.subject_id, &e.set);
                }
            }
        }
        bad
    }

    pub fn to_csv(&self) -> String {
        let mut out = artifact_header(KIND, &[("seed", self.seed.to_string())]);
        out.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stay_id", "subject_id", "set", "fold"]).expect("in-memory write");
        for e in &self.entries {
            let fold = e.fold.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([&e.stay_id, &e.subject_id, &e.set, &fold])
                .expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let (attrs, body) = read_artifact(text, KIND)?;
        let seed = attrs
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Format("manifest header lacks seed=".into()))?;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        if rdr.headers()? != vec!["stay_id", "subject_id", "set", "fold"] {
            return Err(DataError::Format("manifest columns must be stay_id,subject_id,set,fold".into()));
        }
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let fold = match &rec[3] {
                "" => None,
                f => Some(f.parse().map_err(|_| DataError::Parse {
                    line: i + 3,
                    column: "fold".into(),
                    value: f.into(),
                })?),
            };
            entries.push(SplitEntry {
                stay_id: rec[0].into(),
                subject_id: rec[1].into(),
                set: rec[2].into(),
                fold,
            });
        }
        Ok(Self { seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Randomly assigns whole subjects to named sets so that stay counts
/// approach the requested fractions. Each subject goes to the set with the
/// largest remaining stay deficit, visiting subjects in seeded random order.
pub fn split_by_subject(
    samples: &[EhrSample],
    sets: &[(&str, f64)],
    seed: u64,
) -> Result<SplitManifest, DataError> {
    let total: f64 = sets.iter().map(|s| s.1).sum();
    if sets.is_empty() || sets.iter().any(|s| !(s.1 >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!(
            "fractions must be non-negative and sum to 1, got {:?}",
            sets.iter().map(|s| s.1).collect::<Vec<_>>()
        )));
    }
    let mut subjects: Vec<&str> = Vec::new();
    let mut stays: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        let n = stays.entry(s.subject_id.as_str()).or_insert(0);
        if *n == 0 {
            subjects.push(&s.subject_id);
        }
        *n += 1;
    }
    let needed = sets.iter().filter(|s| s.1 > 0.0).count();
    if subjects.len() < needed {
        return Err(DataError::Split(format!(
            "{} subjects cannot fill {needed} non-empty sets",
            subjects.len()
        )));
    }
    subjects.shuffle(&mut rng::seeded(seed));

    let n_stays = samples.len() as f64;
    let mut counts = vec![0usize; sets.len()];
    let mut assignment: HashMap<&str, usize> = HashMap::new();
    for (i, subj) in subjects.iter().enumerate() {
        let remaining = subjects.len() - i;
        let empty: Vec<usize> = (0..sets.len())
            .filter(|&j| sets[j].1 > 0.0 && counts[j] == 0)
            .collect();
        // Reserve the last subjects for sets that would otherwise stay empty.
        let candidates: Vec<usize> = if empty.len() >= remaining {
            empty
        } else {
            (0..sets.len()).filter(|&j| sets[j].1 > 0.0).collect()
        };
        let best = candidates
            .into_iter()
            .max_by(|&a, &b| {
                let da = sets[a].1 * n_stays - counts[a] as f64;
                let db = sets[b].1 * n_stays - counts[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("at least one non-empty set");
        counts[best] += stays[subj];
        assignment.insert(subj, best);
    }

    let entries = samples
        .iter()
        .map(|s| SplitEntry {
            stay_id: s.stay_id.clone(),
            subject_id: s.subject_id.clone(),
            set: sets[assignment[s.subject_id.as_str()]].0.to_string(),
            fold: None,
        })
        .collect();
    Ok(SplitManifest { seed, entries })
}
