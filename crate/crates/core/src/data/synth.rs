//! Synthetic two-modality longitudinal data with a cross-modal,
//! late-sequence label.
//!
//! Two independent AR(1) latents `z1`, `z2` drive the modalities:
//! modality 1 is a noisy linear read-out of `z1`, modality 2 is
//! `tanh(c·(z2 + κ·z1) + d)` plus noise. The label is 1 when the mean of
//! `z1·z2` over the final three time points exceeds a threshold.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schema::{DatasetSchema, FeatureSpec};
use super::{DataError, Dataset, EhrSample};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub max_stays_per_subject: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub f1: usize,
    pub f2: usize,
    /// Probability that any single cell is missing.
    pub missing_rate: f64,
    /// κ: how strongly the modality-1 latent leaks into modality 2.
    pub coupling: f64,
    /// Probability of flipping a label.
    pub label_noise: f64,
    /// AR(1) coefficient of both latents.
    pub persistence: f64,
    pub noise_std: f64,
    pub threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 512,
            max_stays_per_subject: 1,
            t_min: 12,
            t_max: 12,
            f1: 6,
            f2: 4,
            missing_rate: 0.0,
            coupling: 0.8,
            label_noise: 0.0,
            persistence: 0.9,
            noise_std: 0.1,
            threshold: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(format!("synthetic config: {m}")));
        if self.subjects == 0 || self.max_stays_per_subject == 0 {
            return bad("subjects and max_stays_per_subject must be positive");
        }
        if self.t_min < 3 || self.t_min > self.t_max {
            return bad("need 3 <= t_min <= t_max");
        }
        if self.f1 == 0 || self.f2 == 0 {
            return bad("both modalities need at least one feature");
        }
        if !(0.0..1.0).contains(&self.missing_rate) || !(0.0..=0.5).contains(&self.label_noise) {
            return bad("missing_rate must lie in [0, 1) and label_noise in [0, 0.5]");
        }
        if !(self.persistence.abs() < 1.0) || !(self.noise_std >= 0.0) || !self.coupling.is_finite() {
            return bad("persistence must lie in (-1, 1), noise_std >= 0, coupling finite");
        }
        Ok(())
    }

    /// Schema of the generated CSV: all features continuous with normal 0.
    pub fn schema(&self) -> DatasetSchema {
        let mut features: Vec<FeatureSpec> = (0..self.f1)
            .map(|i| FeatureSpec::continuous(&format!("a{i}"), 1, 0.0))
            .collect();
        features.extend((0..self.f2).map(|i| FeatureSpec::continuous(&format!("b{i}"), 2, 0.0)));
        DatasetSchema::new(features)
    }
}

fn ar1(rng: &mut impl Rng, t: usize, phi: f64) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut z = Vec::with_capacity(t);
    let mut cur: f64 = StandardNormal.sample(rng);
    for _ in 0..t {
        z.push(cur);
        let e: f64 = StandardNormal.sample(rng);
        cur = phi * cur + innov * e;
    }
    z
}

/// Raw-layout dataset (columns `a*` then `b*`) with labels and stay
/// lengths attached.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut shape_rng = rng::seeded(rng::derive_seed(seed, 1));
    let load1: Vec<f64> = (0..cfg.f1)
        .map(|_| {
            let sign = if shape_rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * shape_rng.random_range(0.5..1.5)
        })
        .collect();
    let scale2: Vec<f64> = (0..cfg.f2)
        .map(|_| {
            let sign = if shape_rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * shape_rng.random_range(0.5..1.5)
        })
        .collect();
    let shift2: Vec<f64> = (0..cfg.f2).map(|_| shape_rng.random_range(-0.5..0.5)).collect();

    let mut rng = rng::seeded(rng::derive_seed(seed, 2));
    let mut samples = Vec::new();
    for s in 0..cfg.subjects {
        let stays = rng.random_range(1..=cfg.max_stays_per_subject);
        for k in 0..stays {
            let t = rng.random_range(cfg.t_min..=cfg.t_max);
            let z1 = ar1(&mut rng, t, cfg.persistence);
            let z2 = ar1(&mut rng, t, cfg.persistence);
            let mut m1 = Vec::with_capacity(t * cfg.f1);
            let mut m2 = Vec::with_capacity(t * cfg.f2);
            for r in 0..t {
                for a in &load1 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m1.push(a * z1[r] + cfg.noise_std * e);
                }
                for (c, d) in scale2.iter().zip(&shift2) {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m2.push((c * (z2[r] + cfg.coupling * z1[r]) + d).tanh() + cfg.noise_std * e);
                }
            }
            let mut obs1 = vec![true; m1.len()];
            let mut obs2 = vec![true; m2.len()];
            if cfg.missing_rate > 0.0 {
                for (v, o) in m1.iter_mut().zip(&mut obs1).chain(m2.iter_mut().zip(&mut obs2)) {
                    if rng.random_bool(cfg.missing_rate) {
                        *v = f64::NAN;
                        *o = false;
                    }
                }
            }
            let tail = 3.min(t);
            let score: f64 = (t - tail..t).map(|r| z1[r] * z2[r]).sum::<f64>() / tail as f64;
            let mut label = u8::from(score > cfg.threshold);
            if cfg.label_noise > 0.0 && rng.random_bool(cfg.label_noise) {
                label = 1 - label;
            }
            let z2_mean = z2.iter().sum::<f64>() / t as f64;
            samples.push(EhrSample {
                subject_id: format!("p{s:05}"),
                stay_id: format!("p{s:05}-{k}"),
                times: (0..t).map(|r| r as f64).collect(),
                m1: Tensor::new(&[t, cfg.f1], m1)?,
                m2: Tensor::new(&[t, cfg.f2], m2)?,
                observed1: obs1,
                observed2: obs2,
                label: Some(label),
                los_days: Some(7.0 * (0.5 * z2_mean).exp()),
            });
        }
    }
    Ok(Dataset::new(cfg.schema().raw_columns(), samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig {
            subjects: 20,
            max_stays_per_subject: 3,
            t_min: 4,
            t_max: 9,
            missing_rate: 0.1,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 7).unwrap();
        let b = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let c = generate_synthetic(&cfg, 8).unwrap();
        assert_ne!(format!("{a:?}"), format!("{c:?}"));
        assert!(a.samples.iter().all(|s| (4..=9).contains(&s.time_points())));
        assert!(a.missing_count() > 0);
    }

    #[test]
    fn base_rate_near_half() {
        let cfg = SynthConfig {
            subjects: 2000,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, 11).unwrap();
        let rate = d.samples.iter().map(|s| s.label.unwrap() as f64).sum::<f64>() / d.len() as f64;
        assert!((rate - 0.5).abs() <= 0.05, "{rate}");
    }

    #[test]
    fn rejects_bad_ranges() {
        let cfg = SynthConfig {
            t_min: 5,
            t_max: 4,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
        let cfg = SynthConfig {
            missing_rate: 1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
