//! Logistic regression on pooled vectors and a single-layer gated
//! recurrent classifier on sequences.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DownstreamError;
use crate::rng;
use crate::tensor::{AdamConfig, Graph, OptimizerState, Tensor, Var};

/// Column-wise z-scoring fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
                sq = vec![0.0; r.len()];
            }
            for (j, &v) in r.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn apply_matrix(&self, x: &Tensor) -> Tensor {
        let data = (0..x.rows()).flat_map(|r| self.apply(x.row(r))).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }
}

fn check_labels(y: &[u8]) -> Result<(), DownstreamError> {
    if y.is_empty() {
        return Err(DownstreamError::Invalid("empty training set".into()));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(DownstreamError::NonBinary);
    }
    if y.iter().all(|&l| l == y[0]) {
        return Err(DownstreamError::SingleClass);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub standardize: bool,
}

impl Default for LinearHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            l2: 1e-3,
            standardize: true,
        }
    }
}

/// Logistic regression trained by full-batch gradient descent on the mean
/// cross-entropy plus `l2/2 · ‖w‖²`, starting from zero weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub scaler: Option<Standardizer>,
}

pub fn train_linear_classifier(
    x: &[Vec<f64>],
    y: &[u8],
    hyper: &LinearHyper,
) -> Result<LinearClassifier, DownstreamError> {
    check_labels(y)?;
    if x.len() != y.len() {
        return Err(DownstreamError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(DownstreamError::Invalid("feature vectors differ in length".into()));
    }
    let scaler = hyper.standardize.then(|| Standardizer::fit(x.iter().map(Vec::as_slice)));
    let rows: Vec<Vec<f64>> = match &scaler {
        Some(s) => x.iter().map(|r| s.apply(r)).collect(),
        None => x.to_vec(),
    };
    let xt = Tensor::from_rows(&rows)?;
    let targets: Vec<f64> = y.iter().map(|&l| l as f64).collect();
    let mut w = Tensor::zeros(&[d, 1]);
    let mut b = Tensor::zeros(&[1, 1]);
    for _ in 0..hyper.epochs {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(xt.clone()), g.param(&w), g.param(&b));
        let z = g.matmul(xv, wv)?;
        let logits = g.add_row(z, bv)?;
        let mut loss = g.bce_with_logits(logits, &targets)?;
        if hyper.l2 > 0.0 {
            let sq = g.mul(wv, wv)?;
            let s = g.sum(sq);
            let pen = g.scale(s, hyper.l2 / 2.0);
            loss = g.add(loss, pen)?;
        }
        let grads = g.backward(loss)?;
        let (gw, gb) = (grads.get(wv), grads.get(bv));
        for (p, q) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= hyper.learning_rate * q;
        }
        b.data_mut()[0] -= hyper.learning_rate * gb.data()[0];
    }
    if !w.is_finite() || !b.is_finite() {
        return Err(DownstreamError::NonFinite("logistic regression weights".into()));
    }
    Ok(LinearClassifier {
        weights: w.into_data(),
        bias: b.data()[0],
        scaler,
    })
}

impl LinearClassifier {
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter()
            .map(|r| {
                let r = match &self.scaler {
                    Some(s) => s.apply(r),
                    None => r.clone(),
                };
                let z: f64 = r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias;
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurrentHyper {
    pub hidden: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub standardize: bool,
}

impl Default for RecurrentHyper {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 15,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            standardize: true,
        }
    }
}

/// GRU over the sequence; the final hidden state feeds an affine read-out.
///
/// Parameter order: `w_z u_z b_z w_r u_r b_r w_n u_n b_n w_out b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentClassifier {
    pub params: Vec<Tensor>,
    pub scaler: Option<Standardizer>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()).expect("shape")
}

fn gru_logit(g: &mut Graph, p: &[Var], x: &Tensor, hidden: usize) -> Result<Var, DownstreamError> {
    let xv = g.constant(x.clone());
    let xz = g.matmul(xv, p[0])?;
    let xr = g.matmul(xv, p[3])?;
    let xn = g.matmul(xv, p[6])?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    for t in 0..x.rows() {
        let gate = |g: &mut Graph, xp: Var, u: Var, b: Var, h: Var| -> Result<Var, DownstreamError> {
            let a = g.slice_rows(xp, t, t + 1)?;
            let hu = g.matmul(h, u)?;
            let s = g.add(a, hu)?;
            Ok(g.add_row(s, b)?)
        };
        let zp = gate(g, xz, p[1], p[2], h)?;
        let z = g.sigmoid(zp);
        let rp = gate(g, xr, p[4], p[5], h)?;
        let r = g.sigmoid(rp);
        let rh = g.mul(r, h)?;
        let np = gate(g, xn, p[7], p[8], rh)?;
        let n = g.tanh(np);
        let diff = g.sub(n, h)?;
        let step = g.mul(z, diff)?;
        h = g.add(h, step)?;
    }
    let o = g.matmul(h, p[9])?;
    Ok(g.add_row(o, p[10])?)
}

pub fn train_recurrent_classifier(
    x: &[Tensor],
    y: &[u8],
    hyper: &RecurrentHyper,
    seed: u64,
) -> Result<RecurrentClassifier, DownstreamError> {
    check_labels(y)?;
    if x.len() != y.len() {
        return Err(DownstreamError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let d = x[0].cols();
    if x.iter().any(|s| s.cols() != d || s.rows() == 0) {
        return Err(DownstreamError::Invalid("sequences must be non-empty and share a width".into()));
    }
    let h = hyper.hidden;
    let mut init = rng::seeded(rng::derive_seed(seed, 0));
    let mut params = Vec::with_capacity(11);
    for _ in 0..3 {
        params.push(glorot(&mut init, d, h));
        params.push(glorot(&mut init, h, h));
        params.push(Tensor::zeros(&[1, h]));
    }
    params.push(glorot(&mut init, h, 1));
    params.push(Tensor::zeros(&[1, 1]));

    let scaler = hyper
        .standardize
        .then(|| Standardizer::fit(x.iter().flat_map(|s| (0..s.rows()).map(move |r| s.row(r)))));
    let inputs: Vec<Tensor> = match &scaler {
        Some(sc) => x.iter().map(|s| sc.apply_matrix(s)).collect(),
        None => x.to_vec(),
    };
    let mut opt = OptimizerState::new(hyper.adam);
    let mut shuffle = rng::seeded(rng::derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut shuffle);
        for &i in &order {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
            let logit = gru_logit(&mut g, &vars, &inputs[i], h)?;
            let loss = g.bce_with_logits(logit, &[y[i] as f64])?;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut params, &gs)
                .map_err(|_| DownstreamError::NonFinite("recurrent classifier gradient".into()))?;
        }
    }
    Ok(RecurrentClassifier { params, scaler })
}

impl RecurrentClassifier {
    pub fn predict_proba(&self, x: &[Tensor]) -> Result<Vec<f64>, DownstreamError> {
        let h = self.params[1].rows();
        x.iter()
            .map(|s| {
                let s = match &self.scaler {
                    Some(sc) => sc.apply_matrix(s),
                    None => s.clone(),
                };
                let mut g = Graph::new();
                let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
                let logit = gru_logit(&mut g, &vars, &s, h)?;
                let z = g.value(logit).item();
                Ok(1.0 / (1.0 + (-z).exp()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_give_one_half() {
        let x = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let hyper = LinearHyper {
            epochs: 0,
            ..Default::default()
        };
        let clf = train_linear_classifier(&x, &[0, 1], &hyper).unwrap();
        assert_eq!(clf.predict_proba(&x), vec![0.5, 0.5]);
    }

    #[test]
    fn single_class_is_an_error() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train_linear_classifier(&x, &[1, 1], &LinearHyper::default()),
            Err(DownstreamError::SingleClass)
        ));
    }

    #[test]
    fn recurrent_separates_toy_sequences() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let label = (i % 2) as u8;
            let t = 3 + i % 4;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let data = (0..t * 2).map(|k| sign * (0.5 + 0.1 * ((i + k) % 3) as f64)).collect();
            x.push(Tensor::new(&[t, 2], data).unwrap());
            y.push(label);
        }
        let hyper = RecurrentHyper {
            epochs: 20,
            ..Default::default()
        };
        let clf = train_recurrent_classifier(&x, &y, &hyper, 4).unwrap();
        let p = clf.predict_proba(&x).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let acc = p.iter().zip(&y).filter(|(p, &y)| (**p > 0.5) == (y == 1)).count() as f64 / y.len() as f64;
        assert!(acc >= 0.95, "{acc}");
        let again = train_recurrent_classifier(&x, &y, &hyper, 4).unwrap();
        assert_eq!(again, clf);
    }
}
