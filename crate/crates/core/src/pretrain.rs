//! Self-supervised pre-training: forecast the last two time points of a
//! stay from the ones before them.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::data::{artifact_header, read_artifact, split_by_subject, DataError, EhrSample};
use crate::model::{
    loss_and_gradients, pretrain_forward, Ablation, ModelConfig, ModelError, ModelWeights, PretrainPair,
    FORECAST_HORIZON,
};
use crate::rng;
use crate::tensor::{AdamConfig, OptimizerState, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("pre-training needs at least one sample")]
    Empty,
    #[error("non-finite loss at epoch {epoch}, stay {stay_id}")]
    NonFinite { epoch: usize, stay_id: String },
    #[error("invalid pre-training plan: {0}")]
    Plan(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPlan {
    pub epochs: usize,
    /// 1 applies an update per sample. Larger values group samples of equal
    /// length and average their gradients.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    /// 0 disables early stopping.
    pub patience: usize,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            adam: AdamConfig::default(),
            seed: 0,
            validation_fraction: 0.1,
            patience: 20,
        }
    }
}

impl PretrainPlan {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PretrainError::Plan("epochs and batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(PretrainError::Plan(format!(
                "validation_fraction {} is outside (0, 1)",
                self.validation_fraction
            )));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(PretrainError::Plan("Adam settings out of range".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses. Epochs are numbered from 1; the `initial_*` fields
/// hold the losses of the untrained weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCurve {
    pub initial_train_mse: f64,
    pub initial_val_mse: f64,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
}

const CURVE_KIND: &str = "losscurve";

impl LossCurve {
    pub fn epochs_run(&self) -> usize {
        self.train_mse.len()
    }

    pub fn best_val_mse(&self) -> f64 {
        self.val_mse[self.best_epoch - 1]
    }

    /// `epoch,train_mse,val_mse`, with the untrained weights as epoch 0.
    pub fn to_csv(&self) -> String {
        let mut out = artifact_header(CURVE_KIND, &[("best_epoch", self.best_epoch.to_string())]);
        out.push_str("\nepoch,train_mse,val_mse\n");
        out.push_str(&format!("0,{},{}\n", self.initial_train_mse, self.initial_val_mse));
        for (i, (t, v)) in self.train_mse.iter().zip(&self.val_mse).enumerate() {
            out.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let (attrs, body) = read_artifact(text, CURVE_KIND)?;
        let best_epoch = attrs
            .get("best_epoch")
            .and_then(|b| b.parse().ok())
            .ok_or_else(|| DataError::Format("loss curve header lacks best_epoch=".into()))?;
        let mut rows: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64, DataError> {
                rec[c].parse().map_err(|_| DataError::Parse {
                    line: i + 3,
                    column: ["epoch", "train_mse", "val_mse"][c].into(),
                    value: rec[c].into(),
                })
            };
            rows.insert(parse(0)? as usize, (parse(1)?, parse(2)?));
        }
        let (&(t0, v0), rest) = (
            rows.get(&0).ok_or_else(|| DataError::Format("loss curve lacks epoch 0".into()))?,
            rows.range(1..),
        );
        let (train_mse, val_mse) = rest.map(|(_, &(t, v))| (t, v)).unzip();
        Ok(Self {
            initial_train_mse: t0,
            initial_val_mse: v0,
            train_mse,
            val_mse,
            best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Encoder input and decoder target of one stay. The forecasting target is
/// the last two time points and the input everything before them; the
/// reconstruction ablation targets the input window itself.
pub fn split_for_pretrain(sample: &EhrSample, ablation: Ablation) -> Result<PretrainPair, DataError> {
    let t = sample.time_points();
    if t < FORECAST_HORIZON + 1 {
        return Err(DataError::TooShort {
            stay_id: sample.stay_id.clone(),
            time_points: t,
            required: FORECAST_HORIZON + 1,
        });
    }
    let cut = t - FORECAST_HORIZON;
    let input = sample.slice_time(0, cut);
    let target = match ablation {
        Ablation::Reconstruction => input.joint(),
        Ablation::Full | Ablation::NoCrossAttention => sample.slice_time(cut, t).joint(),
    };
    if target.data().iter().any(|v| !v.is_finite()) || input.missing_count() > 0 {
        return Err(DataError::Invalid(format!(
            "stay {} still has missing values; preprocess it first",
            sample.stay_id
        )));
    }
    Ok(PretrainPair {
        m1: input.m1,
        m2: input.m2,
        target,
    })
}

/// Mean of the per-sample losses.
pub fn evaluate_pairs(pairs: &[PretrainPair], w: &ModelWeights) -> Result<f64, PretrainError> {
    if pairs.is_empty() {
        return Err(PretrainError::Empty);
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += pretrain_forward(p, w)?;
    }
    Ok(sum / pairs.len() as f64)
}

pub fn evaluate_mse(samples: &[EhrSample], w: &ModelWeights) -> Result<f64, PretrainError> {
    let pairs = samples
        .iter()
        .map(|s| split_for_pretrain(s, w.config.ablation))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_pairs(&pairs, w)
}

/// A pre-training set with stay ids kept for diagnostics.
pub struct PairSet {
    pub stay_ids: Vec<String>,
    pub pairs: Vec<PretrainPair>,
}

impl PairSet {
    pub fn from_samples(samples: &[EhrSample], ablation: Ablation) -> Result<Self, DataError> {
        Ok(Self {
            stay_ids: samples.iter().map(|s| s.stay_id.clone()).collect(),
            pairs: samples
                .iter()
                .map(|s| split_for_pretrain(s, ablation))
                .collect::<Result<_, _>>()?,
        })
    }
}

fn batches(train: &PairSet, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..train.pairs.len()).collect();
    order.shuffle(rng);
    if batch_size == 1 {
        return order.into_iter().map(|i| vec![i]).collect();
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        buckets.entry(train.pairs[i].m1.rows()).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = buckets
        .into_values()
        .flat_map(|b| b.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    out.shuffle(rng);
    out
}

/// Trains from `init` on `train`, validating on `val` after every epoch.
/// Returns the weights of the epoch with the lowest validation loss.
pub fn pretrain_pairs(
    init: ModelWeights,
    train: &PairSet,
    val: &PairSet,
    plan: &PretrainPlan,
) -> Result<(ModelWeights, LossCurve), PretrainError> {
    plan.validate()?;
    if train.pairs.is_empty() || val.pairs.is_empty() {
        return Err(PretrainError::Empty);
    }
    let mut w = init;
    let mut opt = OptimizerState::new(plan.adam);
    let mut dropout = (w.config.dropout > 0.0)
        .then(|| Dropout::new(w.config.dropout, rng::seeded(rng::derive_seed(plan.seed, 2))));
    let initial_train_mse = evaluate_pairs(&train.pairs, &w)?;
    let initial_val_mse = evaluate_pairs(&val.pairs, &w)?;
    info!("epoch 0: train {initial_train_mse:.6} val {initial_val_mse:.6}");
    let mut curve = LossCurve {
        initial_train_mse,
        initial_val_mse,
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ModelWeights)> = None;
    let mut stale = 0;
    for epoch in 1..=plan.epochs {
        let mut shuffle = rng::seeded(rng::derive_seed(plan.seed, 1000 + epoch as u64));
        let mut sum = 0.0;
        for batch in batches(train, plan.batch_size, &mut shuffle) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in &batch {
                let (loss, grads) = match loss_and_gradients(&train.pairs[i], &w, dropout.as_mut()) {
                    Err(ModelError::NonFinite(_)) => {
                        return Err(PretrainError::NonFinite {
                            epoch,
                            stay_id: train.stay_ids[i].clone(),
                        })
                    }
                    other => other?,
                };
                sum += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            for (p, q) in x.data_mut().iter_mut().zip(g.data()) {
                                *p += q;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("batches are non-empty");
            if batch.len() > 1 {
                let s = 1.0 / batch.len() as f64;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
            opt.step(w.store.tensors_mut(), &grads).map_err(|_| PretrainError::NonFinite {
                epoch,
                stay_id: train.stay_ids[batch[0]].clone(),
            })?;
        }
        let train_mse = sum / train.pairs.len() as f64;
        let val_mse = evaluate_pairs(&val.pairs, &w).map_err(|e| match e {
            PretrainError::Model(ModelError::NonFinite(_)) => PretrainError::NonFinite {
                epoch,
                stay_id: "(validation)".into(),
            },
            e => e,
        })?;
        curve.train_mse.push(train_mse);
        curve.val_mse.push(val_mse);
        debug!("epoch {epoch}: train {train_mse:.6} val {val_mse:.6}");
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, w.clone()));
            curve.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if plan.patience > 0 && stale >= plan.patience {
                info!("early stop at epoch {epoch}, best epoch {}", curve.best_epoch);
                break;
            }
        }
    }
    let (best_val, weights) = best.expect("at least one epoch ran");
    info!(
        "finished after {} epochs: best epoch {} val {best_val:.6}",
        curve.epochs_run(),
        curve.best_epoch
    );
    Ok((weights, curve))
}

/// Holds out a subject-disjoint validation set, initialises weights from
/// the plan seed and trains.
pub fn pretrain(
    samples: &[EhrSample],
    c: &ModelConfig,
    plan: &PretrainPlan,
) -> Result<(ModelWeights, LossCurve), PretrainError> {
    plan.validate()?;
    c.validate()?;
    if samples.is_empty() {
        return Err(PretrainError::Empty);
    }
    for s in samples {
        if s.m1.cols() != c.f1 || s.m2.cols() != c.f2 {
            return Err(ModelError::Config(format!(
                "stay {} has widths ({}, {}) but the model expects ({}, {})",
                s.stay_id,
                s.m1.cols(),
                s.m2.cols(),
                c.f1,
                c.f2
            ))
            .into());
        }
    }
    let manifest = split_by_subject(
        samples,
        &[("train", 1.0 - plan.validation_fraction), ("validation", plan.validation_fraction)],
        rng::derive_seed(plan.seed, 1),
    )?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, e) in samples.iter().zip(&manifest.entries) {
        if e.set == "train" {
            train.push(s.clone());
        } else {
            val.push(s.clone());
        }
    }
    let train = PairSet::from_samples(&train, c.ablation)?;
    let val = PairSet::from_samples(&val, c.ablation)?;
    info!(
        "pre-training {} on {} stays, validating on {}",
        c.ablation,
        train.pairs.len(),
        val.pairs.len()
    );
    let init = ModelWeights::init(c, rng::derive_seed(plan.seed, 0))?;
    pretrain_pairs(init, &train, &val, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn sample(t: usize) -> EhrSample {
        let m1 = Tensor::new(&[t, 2], (0..2 * t).map(|i| i as f64 / 10.0).collect()).unwrap();
        let m2 = Tensor::new(&[t, 1], (0..t).map(|i| -(i as f64)).collect()).unwrap();
        EhrSample::dense("s", "a", (0..t).map(|i| i as f64).collect(), m1, m2)
    }

    #[test]
    fn forecast_split_windows() {
        let p = split_for_pretrain(&sample(3), Ablation::Full).unwrap();
        assert_eq!(p.m1.rows(), 1);
        assert_eq!(p.target.shape(), &[2, 3]);
        let p = split_for_pretrain(&sample(5), Ablation::Full).unwrap();
        assert_eq!(p.m1.rows(), 3);
        assert_eq!(p.target.row(0), &[0.6, 0.7, -3.0]);
        assert_eq!(p.target.row(1), &[0.8, 0.9, -4.0]);
        let r = split_for_pretrain(&sample(5), Ablation::Reconstruction).unwrap();
        assert_eq!(r.target.shape(), &[3, 3]);
        assert!(matches!(
            split_for_pretrain(&sample(2), Ablation::Full),
            Err(DataError::TooShort { .. })
        ));
    }

    #[test]
    fn evaluate_mse_is_a_per_sample_mean() {
        let c = ModelConfig::new(2, 1, 4, 2);
        let w = ModelWeights::init(&c, 3).unwrap();
        let (a, b) = (sample(4), sample(6));
        let la = evaluate_mse(std::slice::from_ref(&a), &w).unwrap();
        let lb = evaluate_mse(std::slice::from_ref(&b), &w).unwrap();
        let both = evaluate_mse(&[a.clone(), b.clone()], &w).unwrap();
        assert!((both - (la + lb) / 2.0).abs() < 1e-12);
        let dup = evaluate_mse(&[a.clone(), b.clone(), a, b], &w).unwrap();
        assert!((dup - both).abs() < 1e-12);
        assert!(matches!(evaluate_mse(&[], &w), Err(PretrainError::Empty)));
    }

    #[test]
    fn deterministic_and_best_epoch_consistent() {
        let cfg = SynthConfig {
            subjects: 24,
            t_min: 5,
            t_max: 7,
            f1: 2,
            f2: 2,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, 1).unwrap();
        let c = ModelConfig::new(2, 2, 4, 2);
        let plan = PretrainPlan {
            epochs: 4,
            batch_size: 3,
            validation_fraction: 0.25,
            seed: 5,
            ..Default::default()
        };
        let (w1, c1) = pretrain(&data.samples, &c, &plan).unwrap();
        let (w2, c2) = pretrain(&data.samples, &c, &plan).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(w1.store.tensors(), w2.store.tensors());
        assert_eq!(c1.epochs_run(), 4);
        let min = c1.val_mse.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(c1.best_val_mse(), min);
        assert_eq!(LossCurve::from_csv(&c1.to_csv()).unwrap(), c1);
    }

    #[test]
    fn rejects_bad_plans() {
        let plan = PretrainPlan {
            validation_fraction: 1.0,
            ..Default::default()
        };
        assert!(plan.validate().is_err());
        let plan = PretrainPlan {
            epochs: 0,
            ..Default::default()
        };
        assert!(plan.validate().is_err());
    }
}
