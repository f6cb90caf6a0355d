use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use caat_ehr::downstream::{
    auc, f1_score, stratified_group_kfold, train_linear_classifier, EvalReport, GroupedLabel, LinearHyper,
    ReportRow, RunMetrics, SealedLabels,
};

fn pair_count_auc(scores: &[f64], truth: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, _) in scores.iter().zip(truth).filter(|(_, &t)| t == 1) {
        for (o, _) in scores.iter().zip(truth).filter(|(_, &t)| t == 0) {
            den += 1.0;
            num += if s > o {
                1.0
            } else if s == o {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40)
        .prop_flat_map(|n| (prop::collection::vec(0u8..6, n), prop::collection::vec(0u8..2, n)))
        .prop_filter("both classes", |(_, t)| t.contains(&0) && t.contains(&1))
        .prop_map(|(s, t)| (s.into_iter().map(|v| v as f64 / 5.0).collect(), t))
}

proptest! {
    #[test]
    fn auc_matches_pair_counting((scores, truth) in labelled_scores()) {
        let got = auc(&scores, &truth).unwrap();
        prop_assert!((got - pair_count_auc(&scores, &truth)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_rank_invariant((scores, truth) in labelled_scores(), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let moved: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(auc(&scores, &truth).unwrap(), auc(&moved, &truth).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &truth).unwrap() - (1.0 - auc(&scores, &truth).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn f1_matches_confusion_counts(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..50)) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let tp = pred.iter().zip(&truth).filter(|&(&p, &t)| p == 1 && t == 1).count();
        let fp = pred.iter().zip(&truth).filter(|&(&p, &t)| p == 1 && t == 0).count();
        let fneg = pred.iter().zip(&truth).filter(|&(&p, &t)| p == 0 && t == 1).count();
        let want = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
        prop_assert_eq!(f1_score(&pred, &truth).unwrap(), want);
    }

    #[test]
    fn kfold_invariants(
        groups in prop::collection::vec((1usize..4, 0u8..2), 40..120),
        seed in any::<u64>(),
        k in 2usize..6,
    ) {
        let items: Vec<GroupedLabel> = groups
            .iter()
            .enumerate()
            .flat_map(|(p, &(n, label))| (0..n).map(move |i| GroupedLabel {
                stay_id: format!("s{p}_{i}"),
                subject_id: format!("p{p}"),
                label: if i == 0 { label } else { 1 - label },
            }))
            .collect();
        let subject: HashMap<&str, &str> = items.iter().map(|i| (i.stay_id.as_str(), i.subject_id.as_str())).collect();
        let Ok(plan) = stratified_group_kfold(&items, k, 2, seed) else {
            return Ok(());
        };
        prop_assert_eq!(plan.runs.len(), 2 * k);
        for r in 0..2 {
            let mut seen = HashSet::new();
            for run in plan.runs.iter().filter(|x| x.repeat == r) {
                let test: HashSet<&str> = run.test.iter().map(String::as_str).collect();
                let train_subjects: HashSet<&str> = run.train.iter().map(|s| subject[s.as_str()]).collect();
                prop_assert!(test.iter().all(|s| !train_subjects.contains(subject[s])));
                prop_assert_eq!(run.train.len() + run.test.len(), items.len());
                for s in &run.test {
                    prop_assert!(seen.insert(s.clone()));
                }
            }
            prop_assert_eq!(seen.len(), items.len());
        }
        prop_assert_eq!(stratified_group_kfold(&items, k, 2, seed).unwrap(), plan);
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn logistic_regression_matches_hand_gradient_descent() {
    let x = vec![vec![1.5, -0.5], vec![-1.0, 2.0]];
    let y = [1u8, 0];
    let hyper = LinearHyper {
        learning_rate: 0.3,
        epochs: 25,
        l2: 0.1,
        standardize: false,
    };
    let model = train_linear_classifier(&x, &y, &hyper).unwrap();

    let (mut w, mut b) = ([0.0f64; 2], 0.0f64);
    for _ in 0..hyper.epochs {
        let mut gw = [0.0; 2];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(&y) {
            let err = sigmoid(w[0] * xi[0] + w[1] * xi[1] + b) - yi as f64;
            gw[0] += err * xi[0] / 2.0;
            gw[1] += err * xi[1] / 2.0;
            gb += err / 2.0;
        }
        for j in 0..2 {
            w[j] -= hyper.learning_rate * (gw[j] + hyper.l2 * w[j]);
        }
        b -= hyper.learning_rate * gb;
    }
    for j in 0..2 {
        assert!((model.weights[j] - w[j]).abs() < 1e-9);
    }
    assert!((model.bias - b).abs() < 1e-9);
    let p = model.predict_proba(&x);
    assert!((p[0] - sigmoid(w[0] * 1.5 - w[1] * 0.5 + b)).abs() < 1e-9);
}

#[test]
fn sealed_labels_score_and_report_aggregation() {
    let m = SealedLabels::new(vec![1, 0, 1, 0]).score(&[0.9, 0.2, 0.4, 0.6]).unwrap();
    assert_eq!(m.f1, 0.5);
    assert_eq!(m.auc, 0.75);

    let runs = [
        RunMetrics { f1: 0.5, auc: 0.6 },
        RunMetrics { f1: 0.7, auc: 0.8 },
    ];
    let row = ReportRow::from_runs("los", "caat", "linear", &runs);
    assert!((row.auc_mean - 0.7).abs() < 1e-12);
    let sd = (0.02f64).sqrt();
    assert!((row.auc_se - sd / 2f64.sqrt()).abs() < 1e-12);
    assert!(ReportRow::from_runs("los", "caat", "linear", &runs[..1]).auc_se.is_nan());

    let report = EvalReport { rows: vec![row] };
    assert_eq!(EvalReport::from_csv(&report.to_csv()).unwrap(), report);
}
