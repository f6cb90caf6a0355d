//! Scaled dot-product and multi-head attention, causal masks, sinusoidal
//! positional encoding and the post-norm residual + feed-forward block.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! can hold owned [`Tensor`]s, checkpoint parameter ids, or graph [`Var`]s.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Layer-norm variance floor. Small enough that normalized rows have unit
/// variance to ~1e-10 for any row whose spread is not degenerate.
pub const LAYER_NORM_EPS: f64 = 1e-10;

/// How queries, keys and values reach the heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkvMode {
    /// Every head owns `W_q`, `W_k`, `W_v` projections of the raw input.
    #[default]
    PerHeadProjection,
    /// Heads are contiguous column slices of the input; no projections.
    SplitOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Boolean attention mask, `true` where attending is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self, TensorError> {
        if allowed.len() != rows * cols {
            return Err(TensorError::Invalid(format!(
                "mask buffer of {} for {rows}x{cols}",
                allowed.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// Lower-triangular mask: position `i` may attend to `j` iff `j <= i`.
pub fn causal_mask(t: usize) -> Mask {
    let allowed = (0..t * t).map(|k| k % t <= k / t).collect();
    Mask {
        rows: t,
        cols: t,
        allowed,
    }
}

/// Sinusoidal encoding: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for col in 0..d {
            let pair = (col / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            pe.set(pos, col, if col % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Multi-head attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: usize,
    pub mode: QkvMode,
    /// Per-head `[d_q_in × d_k]`; empty in split-only mode.
    pub w_q: Vec<T>,
    /// Per-head `[d_kv_in × d_k]`; empty in split-only mode.
    pub w_k: Vec<T>,
    /// Per-head `[d_kv_in × d_v]`; empty in split-only mode.
    pub w_v: Vec<T>,
    /// `[h·d_v × d_model]`.
    pub w_o: T,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            heads: self.heads,
            mode: self.mode,
            w_q: self.w_q.iter().map(&mut f).collect(),
            w_k: self.w_k.iter().map(&mut f).collect(),
            w_v: self.w_v.iter().map(&mut f).collect(),
            w_o: f(&self.w_o),
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &T> {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain(std::iter::once(&self.w_o))
    }
}

/// Post-norm residual block around an attention output:
/// `y1 = LN(x + attn)`, `y2 = LN(y1 + W2·act(W1·y1 + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnBlockParams<T> {
    pub activation: Activation,
    pub layer_norm: bool,
    /// `[d_in × d_model]` projection of the residual input, present only when
    /// the block input is narrower or wider than `d_model`.
    pub skip: Option<T>,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

impl<T> FfnBlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> FfnBlockParams<U> {
        FfnBlockParams {
            activation: self.activation,
            layer_norm: self.layer_norm,
            skip: self.skip.as_ref().map(&mut f),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &T> {
        self.skip.iter().chain([
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ])
    }
}

impl AttentionParams<Tensor> {
    /// Registers every weight on `g` as trainable.
    pub fn bind(&self, g: &mut Graph) -> AttentionParams<Var> {
        self.map(|t| g.param(t))
    }
}

impl FfnBlockParams<Tensor> {
    pub fn bind(&self, g: &mut Graph) -> FfnBlockParams<Var> {
        self.map(|t| g.param(t))
    }
}

/// Inverted dropout driven by its own seeded stream.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = g.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        g.dropout_with_mask(x, mask)
    }
}

/// Output of [`sdpa`]: the attended values and the row-stochastic weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k) V`, with blocked mask entries excluded.
pub fn sdpa(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<AttentionOutput, TensorError> {
    let (qs, ks, vs) = (g.value(q), g.value(k), g.value(v));
    if qs.cols() != ks.cols() {
        return Err(TensorError::Shape {
            op: "sdpa q/k",
            left: qs.shape().to_vec(),
            right: ks.shape().to_vec(),
        });
    }
    if ks.rows() != vs.rows() {
        return Err(TensorError::Shape {
            op: "sdpa k/v",
            left: ks.shape().to_vec(),
            right: vs.shape().to_vec(),
        });
    }
    let (tq, tk, dk) = (qs.rows(), ks.rows(), qs.cols());
    if let Some(m) = mask {
        if m.shape() != (tq, tk) {
            return Err(TensorError::Shape {
                op: "sdpa mask",
                left: vec![tq, tk],
                right: vec![m.rows, m.cols],
            });
        }
        if let Some(row) = (0..tq).find(|&i| (0..tk).all(|j| !m.allowed(i, j))) {
            return Err(TensorError::FullyMasked { row });
        }
    }
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax_rows(scaled, mask.map(Mask::as_slice))?;
    let output = g.matmul(weights, v)?;
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    pub output: Var,
    /// Attention weights per head.
    pub weights: Vec<Var>,
}

/// `Concat(head_1, …, head_h) W_o` where each head attends over either
/// projected inputs or a column slice of them (see [`QkvMode`]).
pub fn multi_head(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams<Var>,
    mask: Option<&Mask>,
) -> Result<MultiHeadOutput, TensorError> {
    let h = p.heads;
    if h == 0 {
        return Err(TensorError::Invalid("attention needs at least one head".into()));
    }
    let (dq, dkv) = (g.value(x_q).cols(), g.value(x_kv).cols());
    let mut heads = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    match p.mode {
        QkvMode::PerHeadProjection => {
            if p.w_q.len() != h || p.w_k.len() != h || p.w_v.len() != h {
                return Err(TensorError::Invalid(format!(
                    "expected {h} projections per role, got {}/{}/{}",
                    p.w_q.len(),
                    p.w_k.len(),
                    p.w_v.len()
                )));
            }
            for i in 0..h {
                let q = g.matmul(x_q, p.w_q[i])?;
                let k = g.matmul(x_kv, p.w_k[i])?;
                let v = g.matmul(x_kv, p.w_v[i])?;
                let a = sdpa(g, q, k, v, mask)?;
                heads.push(a.output);
                weights.push(a.weights);
            }
        }
        QkvMode::SplitOnly => {
            if dq != dkv {
                return Err(TensorError::Shape {
                    op: "split-only attention",
                    left: g.value(x_q).shape().to_vec(),
                    right: g.value(x_kv).shape().to_vec(),
                });
            }
            if dq % h != 0 {
                return Err(TensorError::Invalid(format!(
                    "width {dq} not divisible by {h} heads"
                )));
            }
            let w = dq / h;
            for i in 0..h {
                let q = g.slice_cols(x_q, i * w, (i + 1) * w)?;
                let kv = g.slice_cols(x_kv, i * w, (i + 1) * w)?;
                let a = sdpa(g, q, kv, kv, mask)?;
                heads.push(a.output);
                weights.push(a.weights);
            }
        }
    }
    let mut cat = heads[0];
    for &hd in &heads[1..] {
        cat = g.concat_cols(cat, hd)?;
    }
    let output = g.matmul(cat, p.w_o)?;
    Ok(MultiHeadOutput { output, weights })
}

/// Residual connections, layer norms and the position-wise FFN applied
/// after an attention layer.
pub fn residual_ffn_block(
    g: &mut Graph,
    x: Var,
    attn_out: Var,
    p: &FfnBlockParams<Var>,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, TensorError> {
    let residual = match p.skip {
        Some(w) => g.matmul(x, w)?,
        None => x,
    };
    let attn_out = match dropout.as_deref_mut() {
        Some(d) => d.apply(g, attn_out)?,
        None => attn_out,
    };
    let sum1 = g.add(residual, attn_out)?;
    let y1 = if p.layer_norm {
        g.layer_norm(sum1, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS)?
    } else {
        sum1
    };
    let hidden = g.matmul(y1, p.w1)?;
    let hidden = g.add_row(hidden, p.b1)?;
    let hidden = match p.activation {
        Activation::Relu => g.relu(hidden),
        Activation::Tanh => g.tanh(hidden),
    };
    let ffn = g.matmul(hidden, p.w2)?;
    let ffn = g.add_row(ffn, p.b2)?;
    let ffn = match dropout {
        Some(d) => d.apply(g, ffn)?,
        None => ffn,
    };
    let sum2 = g.add(y1, ffn)?;
    if p.layer_norm {
        g.layer_norm(sum2, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS)
    } else {
        Ok(sum2)
    }
}
