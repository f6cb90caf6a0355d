use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use caat_ehr::data::{
    fit_apply_znorm, generate_synthetic, impute_knn_rows, one_hot_encode, read_processed, read_raw_csv,
    run_pipeline, split_by_subject, write_processed, write_raw_csv, Dataset, DatasetSchema, EhrSample,
    FeatureSpec, Imputation, SynthConfig,
};
use caat_ehr::tensor::Tensor;

fn schema() -> DatasetSchema {
    DatasetSchema::new(vec![
        FeatureSpec::continuous("hr", 1, 80.0),
        FeatureSpec::continuous("temp", 1, 37.0),
        FeatureSpec::categorical("gcs", &["low", "mid", "high"], "high"),
        FeatureSpec::categorical("cap", &["normal", "slow"], "normal"),
    ])
}

type Cell = Option<f64>;

#[derive(Clone, Debug)]
struct RawStay {
    subject: usize,
    cont: Vec<[Cell; 2]>,
    cat: Vec<[Option<usize>; 2]>,
    label: u8,
    los: f64,
}

fn raw_stay() -> impl Strategy<Value = RawStay> {
    (0usize..6, 1usize..7).prop_flat_map(|(subject, t)| {
        (
            Just(subject),
            prop::collection::vec([prop::option::of(-50.0..150.0f64), prop::option::of(30.0..42.0f64)], t),
            prop::collection::vec([prop::option::of(0usize..3), prop::option::of(0usize..2)], t),
            0u8..2,
            0.0..40.0f64,
        )
            .prop_map(|(subject, cont, cat, label, los)| RawStay {
                subject,
                cont,
                cat,
                label,
                los,
            })
    })
}

fn to_sample(i: usize, s: &RawStay) -> EhrSample {
    let t = s.cont.len();
    let m1: Vec<f64> = s.cont.iter().flatten().map(|v| v.unwrap_or(f64::NAN)).collect();
    let m2: Vec<f64> = s.cat.iter().flatten().map(|v| v.map_or(f64::NAN, |l| l as f64)).collect();
    EhrSample {
        subject_id: format!("p{}", s.subject),
        stay_id: format!("s{i}"),
        times: (0..t).map(|r| r as f64 * 0.5).collect(),
        observed1: m1.iter().map(|v| !v.is_nan()).collect(),
        observed2: m2.iter().map(|v| !v.is_nan()).collect(),
        m1: Tensor::new(&[t, 2], m1).unwrap(),
        m2: Tensor::new(&[t, 2], m2).unwrap(),
        label: Some(s.label),
        los_days: Some(s.los),
    }
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()))
}

fn brute_knn(rows: &[Vec<Cell>], k: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let mut filled = Vec::new();
        for (j, cell) in row.iter().enumerate() {
            if let Some(v) = cell {
                filled.push(*v);
                continue;
            }
            let mut cands: Vec<(f64, usize)> = Vec::new();
            for (d, other) in rows.iter().enumerate() {
                if d == i || other[j].is_none() {
                    continue;
                }
                let pairs: Vec<(f64, f64)> = row
                    .iter()
                    .zip(other)
                    .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
                    .collect();
                let dist = if pairs.is_empty() {
                    f64::INFINITY
                } else {
                    pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                };
                cands.push((dist, d));
            }
            cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let chosen = &cands[..k.min(cands.len())];
            filled.push(chosen.iter().map(|&(_, d)| rows[d][j].unwrap()).sum::<f64>() / chosen.len() as f64);
        }
        out.push(filled);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raw_csv_round_trip(stays in prop::collection::vec(raw_stay(), 1..8)) {
        let schema = schema();
        let data = Dataset::new(schema.raw_columns(), stays.iter().enumerate().map(|(i, s)| to_sample(i, s)).collect());
        let mut buf = Vec::new();
        write_raw_csv(&mut buf, &data, &schema).unwrap();
        let back = read_raw_csv(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back.samples.len(), data.samples.len());
        for (a, b) in data.samples.iter().zip(&back.samples) {
            prop_assert_eq!(&a.stay_id, &b.stay_id);
            prop_assert_eq!(&a.subject_id, &b.subject_id);
            prop_assert_eq!(&a.times, &b.times);
            prop_assert_eq!(&a.observed1, &b.observed1);
            prop_assert_eq!(&a.observed2, &b.observed2);
            prop_assert!(same_bits(&a.m1, &b.m1) && same_bits(&a.m2, &b.m2));
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.los_days, b.los_days);
        }
    }

    #[test]
    fn knn_matches_brute_force(
        rows in (1usize..4).prop_flat_map(|w| prop::collection::vec(prop::collection::vec(prop::option::weighted(0.7, -5.0..5.0f64), w), 2..12)),
        k in 1usize..5,
    ) {
        let width = rows[0].len();
        prop_assume!((0..width).all(|j| rows.iter().any(|r| r[j].is_some())));
        let got = impute_knn_rows(&rows, k).unwrap();
        let want = brute_knn(&rows, k);
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            prop_assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn one_hot_rows_sum_to_categorical_count(stays in prop::collection::vec(raw_stay(), 1..4)) {
        let schema = schema();
        for (i, s) in stays.iter().enumerate() {
            let mut dense = s.clone();
            for row in &mut dense.cat {
                row[0] = Some(row[0].unwrap_or(2));
                row[1] = Some(row[1].unwrap_or(0));
            }
            let hot = one_hot_encode(&to_sample(i, &dense), &schema).unwrap();
            prop_assert_eq!(hot.m2.cols(), 5);
            for r in 0..hot.time_points() {
                prop_assert_eq!(hot.m2.row(r).iter().sum::<f64>(), 2.0);
                prop_assert!(hot.m2.row(r).iter().all(|&v| v == 0.0 || v == 1.0));
            }
            prop_assert!(same_bits(&hot.m1, &to_sample(i, &dense).m1));
        }
    }

    #[test]
    fn split_keeps_subjects_whole(
        subjects in prop::collection::vec(1usize..4, 2..60),
        frac in 0.1..0.9f64,
        seed in any::<u64>(),
    ) {
        let samples: Vec<EhrSample> = subjects
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| (0..n).map(move |k| (p, k)))
            .map(|(p, k)| EhrSample::dense(&format!("p{p}"), &format!("s{p}_{k}"), vec![0.0], Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])))
            .collect();
        let m = split_by_subject(&samples, &[("a", frac), ("b", 1.0 - frac)], seed).unwrap();
        prop_assert!(m.purity_violations().is_empty());
        prop_assert_eq!(m.entries.len(), samples.len());
        let mut sets: HashMap<&str, HashSet<&str>> = HashMap::new();
        for e in &m.entries {
            sets.entry(&e.subject_id).or_default().insert(&e.set);
        }
        prop_assert!(sets.values().all(|s| s.len() == 1));
        prop_assert!(!m.stays_in("a").is_empty() && !m.stays_in("b").is_empty());
        let again = split_by_subject(&samples, &[("a", frac), ("b", 1.0 - frac)], seed).unwrap();
        prop_assert_eq!(m, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pipeline_leaves_no_missing_values(seed in 0u64..1000, missing in 0.0..0.5f64, knn in any::<bool>()) {
        let cfg = SynthConfig {
            subjects: 40,
            max_stays_per_subject: 2,
            t_min: 3,
            t_max: 8,
            missing_rate: missing,
            ..SynthConfig::default()
        };
        let mut schema = cfg.schema();
        schema.imputation = if knn { Imputation::Knn } else { Imputation::Locf };
        let out = run_pipeline(generate_synthetic(&cfg, seed).unwrap(), &schema, 0.7, seed).unwrap();
        prop_assert_eq!(out.embedding.missing_count() + out.downstream.missing_count(), 0);
        prop_assert!(out.manifest.purity_violations().is_empty());
        let emb: HashSet<&str> = out.embedding.samples.iter().map(|s| s.subject_id.as_str()).collect();
        prop_assert!(out.downstream.samples.iter().all(|s| !emb.contains(s.subject_id.as_str())));

        let mut buf = Vec::new();
        write_processed(&mut buf, &out.embedding).unwrap();
        let back = read_processed(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back.samples.len(), out.embedding.samples.len());
        for (a, b) in out.embedding.samples.iter().zip(&back.samples) {
            prop_assert!(same_bits(&a.m1, &b.m1) && same_bits(&a.m2, &b.m2));
        }
    }

    #[test]
    fn norm_stats_ignore_the_other_split(seed in 0u64..1000, scale in 0.1..100.0f64) {
        let cfg = SynthConfig { subjects: 30, ..SynthConfig::default() };
        let schema = cfg.schema();
        let fit = generate_synthetic(&cfg, seed).unwrap();
        let other = generate_synthetic(&cfg, seed + 1).unwrap();
        let mut warped = other.clone();
        for s in &mut warped.samples {
            s.m1 = s.m1.map(|v| v * scale + 3.0);
        }
        let (mut f1, mut o1) = (fit.clone(), other);
        let (mut f2, mut o2) = (fit, warped);
        let a = fit_apply_znorm(&mut f1, &mut [&mut o1], &schema, "embedding").unwrap();
        let b = fit_apply_znorm(&mut f2, &mut [&mut o2], &schema, "embedding").unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(&f1, &f2);
        let col: Vec<f64> = f1.samples.iter().flat_map(|s| (0..s.time_points()).map(|r| s.m1.get(r, 0)).collect::<Vec<_>>()).collect();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}
