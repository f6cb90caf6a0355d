use proptest::prelude::*;

use caat_ehr::tensor::{grad_check_many, AdamConfig, Graph, OptimizerState, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    bounded(rows, cols, 3.0)
}

fn bounded(rows: usize, cols: usize, r: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-r..r, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i * m + j] += a.get(i, l) * b.get(l, j);
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m)))
    ) {
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c)), shift in -50.0..50.0f64) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.softmax_rows(v, None).unwrap();
        let shifted = g.constant(x.map(|e| e + shift));
        let ys = g.softmax_rows(shifted, None).unwrap();
        let (p, ps) = (g.value(y).clone(), g.value(ys).clone());
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&e| e > 0.0));
        }
        for (a, b) in p.data().iter().zip(ps.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(x in bounded(3, 4, 1.0), w in bounded(4, 2, 1.0)) {
        let rep = grad_check_many(
            |g, v| {
                let v = v[0];
                let wv = g.constant(w.clone());
                let h = g.matmul(v, wv)?;
                let h = g.tanh(h);
                let s = g.softmax_rows(h, None)?;
                let s = g.mul(s, h)?;
                Ok(g.sum(s))
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        prop_assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn adam_matches_scripted_update(
        p0 in prop::collection::vec(-2.0..2.0f64, 3),
        grads in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 1..6),
        lr in 1e-4..0.1f64,
    ) {
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let mut params = vec![Tensor::new(&[3], p0.clone()).unwrap()];
        let mut opt = OptimizerState::new(cfg);
        let (mut x, mut m, mut v) = (p0, [0.0; 3], [0.0; 3]);
        for (t, gr) in grads.iter().enumerate() {
            opt.step(&mut params, &[Tensor::new(&[3], gr.clone()).unwrap()]).unwrap();
            let t = t as i32 + 1;
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * gr[i];
                v[i] = 0.999 * v[i] + 0.001 * gr[i] * gr[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in params[0].data().iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(opt.step_count(), grads.len() as u64);
    }
}

#[test]
fn adam_skips_non_finite_gradients() {
    let mut params = vec![Tensor::new(&[2], vec![1.0, 2.0]).unwrap()];
    let mut opt = OptimizerState::new(AdamConfig::default());
    let bad = Tensor::new(&[2], vec![0.5, f64::NAN]).unwrap();
    assert!(opt.step(&mut params, &[bad]).is_err());
    assert_eq!(params[0].data(), [1.0, 2.0]);
    assert_eq!(opt.step_count(), 0);
}
