use proptest::prelude::*;

use caat_ehr::data::{generate_synthetic, EhrSample, SynthConfig};
use caat_ehr::model::{init_weights, pretrain_forward, Ablation, ModelConfig};
use caat_ehr::pretrain::{evaluate_mse, pretrain, split_for_pretrain, LossCurve, PretrainPlan};
use caat_ehr::tensor::Tensor;

fn sample(t: usize, offset: f64) -> EhrSample {
    let m1 = Tensor::new(&[t, 2], (0..2 * t).map(|i| offset + i as f64 / 10.0).collect()).unwrap();
    let m2 = Tensor::new(&[t, 1], (0..t).map(|i| -(i as f64) / 4.0).collect()).unwrap();
    EhrSample::dense("p", &format!("s{offset}"), (0..t).map(|i| i as f64).collect(), m1, m2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forecast_and_reconstruction_windows(t in 3usize..12) {
        let s = sample(t, 0.0);
        let f = split_for_pretrain(&s, Ablation::Full).unwrap();
        prop_assert_eq!(f.m1.rows(), t - 2);
        prop_assert_eq!(f.target.shape(), &[2, 3]);
        let joint = s.joint();
        prop_assert_eq!(f.target.row(0), joint.row(t - 2));
        prop_assert_eq!(f.target.row(1), joint.row(t - 1));
        let r = split_for_pretrain(&s, Ablation::Reconstruction).unwrap();
        prop_assert_eq!(r.target, s.slice_time(0, t - 2).joint());
    }

    #[test]
    fn evaluate_mse_is_the_mean_of_squared_errors(ts in prop::collection::vec(3usize..9, 1..5), seed in 0u64..100) {
        let samples: Vec<EhrSample> = ts.iter().enumerate().map(|(i, &t)| sample(t, i as f64)).collect();
        let w = init_weights(&ModelConfig::new(2, 1, 4, 2), seed).unwrap();
        let mut total = 0.0;
        for s in &samples {
            let pair = split_for_pretrain(s, Ablation::Full).unwrap();
            let pred = caat_ehr::model::decode(
                &caat_ehr::model::encode(&pair.m1, &pair.m2, w.encoder_view()).unwrap(),
                &w,
            )
            .unwrap();
            let se: f64 = pred.data().iter().zip(pair.target.data()).map(|(a, b)| (a - b).powi(2)).sum();
            let mse = se / pred.numel() as f64;
            prop_assert!((mse - pretrain_forward(&pair, &w).unwrap()).abs() < 1e-12);
            total += mse;
        }
        let got = evaluate_mse(&samples, &w).unwrap();
        prop_assert!((got - total / samples.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn short_stays_are_rejected_by_name() {
    let err = split_for_pretrain(&sample(2, 0.0), Ablation::Full).unwrap_err();
    assert!(err.to_string().contains("s0"), "{err}");
}

#[test]
fn training_is_deterministic_and_returns_the_best_epoch() {
    let cfg = SynthConfig {
        subjects: 40,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, 3).unwrap();
    let c = ModelConfig::new(cfg.f1, cfg.f2, 8, 2);
    let plan = PretrainPlan {
        epochs: 6,
        batch_size: 3,
        seed: 3,
        ..PretrainPlan::default()
    };
    let (w1, c1) = pretrain(&data.samples, &c, &plan).unwrap();
    let (w2, c2) = pretrain(&data.samples, &c, &plan).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(c1, c2);
    assert_eq!(c1.epochs_run(), 6);
    let best = c1.val_mse.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(c1.best_val_mse(), best);
    assert_eq!(c1.val_mse[c1.best_epoch - 1], best);
    assert!(best < c1.initial_val_mse);
    assert_eq!(LossCurve::from_csv(&c1.to_csv()).unwrap(), c1);
}
