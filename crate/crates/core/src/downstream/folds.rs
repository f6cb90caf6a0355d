use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;

use super::DownstreamError;
use crate::rng;

/// Largest allowed gap, in proportion, between a test fold's positive rate
/// and the overall rate.
pub const STRATIFICATION_TOLERANCE: f64 = 0.05;

/// The identity, group and label of one stay.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupedLabel {
    pub stay_id: String,
    pub subject_id: String,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FoldScheme {
    KFold { k: usize },
    /// One subject-disjoint train/test split per repeat.
    Holdout { test_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldRun {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub scheme: FoldScheme,
    pub repeats: usize,
    pub seed: u64,
    pub runs: Vec<FoldRun>,
}

struct Subject {
    stays: Vec<usize>,
    counts: [usize; 2],
}

/// Places whole subjects into bins with target shares `weights`, largest
/// subjects first, each into the bin whose class counts it moves closest
/// to their quotas.
fn assign(items: &[GroupedLabel], weights: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<&str> = Vec::new();
    let mut subjects: HashMap<&str, Subject> = HashMap::new();
    for (i, it) in items.iter().enumerate() {
        let s = subjects.entry(&it.subject_id).or_insert_with(|| {
            order.push(&it.subject_id);
            Subject {
                stays: Vec::new(),
                counts: [0, 0],
            }
        });
        s.stays.push(i);
        s.counts[it.label as usize] += 1;
    }
    order.shuffle(&mut rng::seeded(seed));
    order.sort_by_key(|s| std::cmp::Reverse(subjects[s].stays.len()));

    let totals = [
        items.iter().filter(|i| i.label == 0).count() as f64,
        items.iter().filter(|i| i.label == 1).count() as f64,
    ];
    let mut counts = vec![[0.0f64; 2]; weights.len()];
    let mut bins = vec![Vec::new(); weights.len()];
    for name in order {
        let s = &subjects[name];
        let best = (0..weights.len())
            .map(|b| {
                let cost: f64 = (0..2)
                    .map(|j| {
                        let gap = counts[b][j] - weights[b] * totals[j];
                        let after = gap + s.counts[j] as f64;
                        after * after - gap * gap
                    })
                    .sum();
                (cost, b)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("at least one bin")
            .1;
        for j in 0..2 {
            counts[best][j] += s.counts[j] as f64;
        }
        bins[best].extend_from_slice(&s.stays);
    }
    for b in &mut bins {
        b.sort_unstable();
    }
    bins
}

fn check_inputs(items: &[GroupedLabel], min_subjects: usize) -> Result<(), DownstreamError> {
    if items.iter().any(|i| i.label > 1) {
        return Err(DownstreamError::NonBinary);
    }
    let mut seen = HashSet::new();
    for i in items {
        if !seen.insert(i.stay_id.as_str()) {
            return Err(DownstreamError::Invalid(format!("duplicate stay {}", i.stay_id)));
        }
    }
    for class in 0..2u8 {
        let n = items
            .iter()
            .filter(|i| i.label == class)
            .map(|i| i.subject_id.as_str())
            .collect::<HashSet<_>>()
            .len();
        if n < min_subjects {
            return Err(DownstreamError::Infeasible(format!(
                "class {class} has {n} subjects, need at least {min_subjects}"
            )));
        }
    }
    Ok(())
}

fn ids(items: &[GroupedLabel], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| items[i].stay_id.clone()).collect()
}

/// Repeated k-fold cross-validation with every subject confined to one
/// fold and class proportions kept close to the overall rate.
pub fn stratified_group_kfold(
    items: &[GroupedLabel],
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<FoldPlan, DownstreamError> {
    if k < 2 || repeats == 0 {
        return Err(DownstreamError::Invalid(format!("need k >= 2 and repeats >= 1, got k={k}, repeats={repeats}")));
    }
    check_inputs(items, k)?;
    let weights = vec![1.0 / k as f64; k];
    let mut runs = Vec::with_capacity(k * repeats);
    for r in 0..repeats {
        let bins = assign(items, &weights, rng::derive_seed(seed, r as u64));
        for (f, test) in bins.iter().enumerate() {
            let train: Vec<usize> = (0..items.len()).filter(|i| test.binary_search(i).is_err()).collect();
            runs.push(FoldRun {
                repeat: r,
                fold: f,
                train: ids(items, &train),
                test: ids(items, test),
            });
        }
    }
    let plan = FoldPlan {
        scheme: FoldScheme::KFold { k },
        repeats,
        seed,
        runs,
    };
    plan.verify(items)?;
    Ok(plan)
}

/// Repeated subject-disjoint train/test splits with `test_fraction` of
/// the stays held out.
pub fn stratified_group_holdout(
    items: &[GroupedLabel],
    test_fraction: f64,
    repeats: usize,
    seed: u64,
) -> Result<FoldPlan, DownstreamError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) || repeats == 0 {
        return Err(DownstreamError::Invalid(format!(
            "test fraction {test_fraction} must lie in (0, 1) and repeats be positive"
        )));
    }
    check_inputs(items, 2)?;
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let bins = assign(items, &[test_fraction, 1.0 - test_fraction], rng::derive_seed(seed, r as u64));
        runs.push(FoldRun {
            repeat: r,
            fold: 0,
            train: ids(items, &bins[1]),
            test: ids(items, &bins[0]),
        });
    }
    let plan = FoldPlan {
        scheme: FoldScheme::Holdout { test_fraction },
        repeats,
        seed,
        runs,
    };
    plan.verify(items)?;
    Ok(plan)
}

impl FoldPlan {
    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    /// Checks every run: train and test disjoint by subject and together
    /// covering the dataset, test class rate within tolerance, and for
    /// k-fold plans test sets partitioning each repeat.
    pub fn verify(&self, items: &[GroupedLabel]) -> Result<(), DownstreamError> {
        let by_stay: HashMap<&str, &GroupedLabel> = items.iter().map(|i| (i.stay_id.as_str(), i)).collect();
        let overall = items.iter().filter(|i| i.label == 1).count() as f64 / items.len() as f64;
        let fail = |m: String| Err(DownstreamError::Infeasible(m));
        for run in &self.runs {
            let subjects = |list: &[String]| -> Result<HashSet<&str>, DownstreamError> {
                list.iter()
                    .map(|s| {
                        by_stay
                            .get(s.as_str())
                            .map(|i| i.subject_id.as_str())
                            .ok_or_else(|| DownstreamError::Invalid(format!("unknown stay {s}")))
                    })
                    .collect()
            };
            let (tr, te) = (subjects(&run.train)?, subjects(&run.test)?);
            if let Some(s) = tr.intersection(&te).next() {
                return fail(format!("subject {s} is in both train and test (repeat {}, fold {})", run.repeat, run.fold));
            }
            if run.train.len() + run.test.len() != items.len() || run.test.is_empty() || run.train.is_empty() {
                return fail(format!("repeat {}, fold {} does not cover the dataset", run.repeat, run.fold));
            }
            let pos = run.test.iter().filter(|s| by_stay[s.as_str()].label == 1).count() as f64;
            let rate = pos / run.test.len() as f64;
            if (rate - overall).abs() > STRATIFICATION_TOLERANCE + 1e-12 {
                return fail(format!(
                    "repeat {}, fold {}: positive rate {rate:.3} vs overall {overall:.3}",
                    run.repeat, run.fold
                ));
            }
        }
        if let FoldScheme::KFold { k } = self.scheme {
            for r in 0..self.repeats {
                let mut seen = HashSet::new();
                for run in self.runs.iter().filter(|x| x.repeat == r) {
                    for s in &run.test {
                        if !seen.insert(s.as_str()) {
                            return fail(format!("stay {s} is tested twice in repeat {r}"));
                        }
                    }
                }
                if seen.len() != items.len() || self.runs.iter().filter(|x| x.repeat == r).count() != k {
                    return fail(format!("test folds of repeat {r} do not partition the dataset"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(spec: &[(usize, &[u8])]) -> Vec<GroupedLabel> {
        let mut out = Vec::new();
        for &(s, labels) in spec {
            for (k, &l) in labels.iter().enumerate() {
                out.push(GroupedLabel {
                    stay_id: format!("p{s}-{k}"),
                    subject_id: format!("p{s}"),
                    label: l,
                });
            }
        }
        out
    }

    #[test]
    fn balanced_singletons_split_evenly() {
        let spec: Vec<(usize, &[u8])> = (0..10).map(|s| (s, if s % 2 == 0 { &[0u8][..] } else { &[1u8][..] })).collect();
        let it = items(&spec);
        let plan = stratified_group_kfold(&it, 5, 1, 3).unwrap();
        for run in &plan.runs {
            assert_eq!(run.test.len(), 2);
            let pos = run.test.iter().filter(|s| it.iter().find(|i| &i.stay_id == *s).unwrap().label == 1).count();
            assert_eq!(pos, 1);
        }
    }

    #[test]
    fn multi_stay_subject_stays_in_one_fold() {
        let mut spec: Vec<(usize, &[u8])> = (0..20).map(|s| (s, if s % 2 == 0 { &[0u8][..] } else { &[1u8][..] })).collect();
        spec.push((99, &[0, 1, 0]));
        let it = items(&spec);
        let plan = stratified_group_kfold(&it, 2, 3, 0).unwrap();
        assert_eq!(plan.run_count(), 6);
        for run in &plan.runs {
            let n = run.test.iter().filter(|s| s.starts_with("p99-")).count();
            assert!(n == 0 || n == 3);
        }
    }

    #[test]
    fn fifty_runs() {
        let spec: Vec<(usize, &[u8])> = (0..40).map(|s| (s, if s % 2 == 0 { &[0u8][..] } else { &[1u8][..] })).collect();
        assert_eq!(stratified_group_kfold(&items(&spec), 5, 10, 1).unwrap().run_count(), 50);
    }

    #[test]
    fn too_few_subjects_per_class_is_reported() {
        let spec: Vec<(usize, &[u8])> = (0..10).map(|s| (s, if s < 8 { &[0u8][..] } else { &[1u8][..] })).collect();
        assert!(matches!(stratified_group_kfold(&items(&spec), 5, 1, 0), Err(DownstreamError::Infeasible(_))));
    }

    #[test]
    fn holdout_keeps_subjects_apart() {
        let spec: Vec<(usize, &[u8])> = (0..30).map(|s| (s, if s % 3 == 0 { &[1u8, 1][..] } else { &[0u8][..] })).collect();
        let it = items(&spec);
        let plan = stratified_group_holdout(&it, 0.3, 4, 2).unwrap();
        assert_eq!(plan.run_count(), 4);
        let frac = plan.runs[0].test.len() as f64 / it.len() as f64;
        assert!((frac - 0.3).abs() < 0.1, "{frac}");
    }
}
