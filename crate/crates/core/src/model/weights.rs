use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Ablation, ModelConfig, ModelError};
use crate::attention::{AttentionParams, FfnBlockParams, QkvMode};
use crate::rng::seeded;
use crate::tensor::{Graph, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered list of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Records which store entries were registered on a graph, so gradients can
/// be gathered back in store order.
#[derive(Debug)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.param(self.store.get(id));
        self.vars[id.0] = Some(v);
        v
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients for every store entry; unbound entries get zeros.
    pub fn gather(&self, grads: &crate::tensor::Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(v, t)| match v {
                Some(v) => grads.get(*v),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// One attention layer and its residual/FFN block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T> {
    pub attention: AttentionParams<T>,
    pub block: FfnBlockParams<T>,
}

impl<T> AttentionLayer<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionLayer<U> {
        AttentionLayer {
            attention: self.attention.map(&mut f),
            block: self.block.map(&mut f),
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &T> {
        self.attention.leaves().chain(self.block.leaves())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

/// How the two self-attended modalities are mixed.
#[derive(Clone, Debug, PartialEq)]
pub enum Fusion<T> {
    /// `layers[l][i]` is the cross-attention of modality `i` over the other
    /// modality at depth `l`.
    CrossAttention(Vec<[AttentionLayer<T>; 2]>),
    /// Per-modality linear maps; no information crosses modalities.
    Projection([Linear<T>; 2]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    /// `self_attention[i][l]`: modality `i`, depth `l`.
    pub self_attention: [Vec<AttentionLayer<T>>; 2],
    pub fusion: Fusion<T>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderParams<U> {
        let sa = |layers: &Vec<AttentionLayer<T>>, f: &mut dyn FnMut(&T) -> U| {
            layers.iter().map(|l| l.map(&mut *f)).collect::<Vec<_>>()
        };
        let self_attention = [sa(&self.self_attention[0], &mut f), sa(&self.self_attention[1], &mut f)];
        let fusion = match &self.fusion {
            Fusion::CrossAttention(layers) => Fusion::CrossAttention(
                layers
                    .iter()
                    .map(|[a, b]| [a.map(&mut f), b.map(&mut f)])
                    .collect(),
            ),
            Fusion::Projection([a, b]) => Fusion::Projection([a.map(&mut f), b.map(&mut f)]),
        };
        EncoderParams {
            self_attention,
            fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    /// Learned start tokens: `[2 × d_dec]`, or `[1 × d_dec]` broadcast over
    /// the input length in the reconstruction variant.
    pub start: T,
    pub self_attention: AttentionLayer<T>,
    pub cross_attention: AttentionLayer<T>,
    pub output: Linear<T>,
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DecoderParams<U> {
        DecoderParams {
            start: f(&self.start),
            self_attention: self.self_attention.map(&mut f),
            cross_attention: self.cross_attention.map(&mut f),
            output: self.output.map(&mut f),
        }
    }
}

/// All trainable tensors of encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams<ParamId>,
    pub decoder: DecoderParams<ParamId>,
}

/// Read-only view of the encoder half of a model. Inference code takes this
/// type so it cannot reach decoder tensors.
#[derive(Clone, Copy, Debug)]
pub struct EncoderView<'a> {
    pub config: &'a ModelConfig,
    pub store: &'a ParamStore,
    pub params: &'a EncoderParams<ParamId>,
}

enum Init<'r> {
    Random(&'r mut ChaCha8Rng),
    Zeros,
}

struct Builder<'r> {
    store: ParamStore,
    init: Init<'r>,
}

impl Builder<'_> {
    fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let t = match &mut self.init {
            Init::Random(rng) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
                Tensor::new(&[fan_in, fan_out], data).expect("glorot shape")
            }
            Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
        };
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        let t = match self.init {
            Init::Random(_) => Tensor::full(shape, value),
            Init::Zeros => Tensor::zeros(shape),
        };
        self.store.add(name, t)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = match &mut self.init {
            Init::Random(rng) => {
                let dist = Normal::new(0.0, std).expect("normal std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut **rng)).collect())
                    .expect("normal shape")
            }
            Init::Zeros => Tensor::zeros(shape),
        };
        self.store.add(name, t)
    }

    fn attention(
        &mut self,
        prefix: &str,
        c: &ModelConfig,
        d_q_in: usize,
        d_kv_in: usize,
        d_out: usize,
    ) -> AttentionParams<ParamId> {
        let h = c.heads;
        let (mut w_q, mut w_k, mut w_v) = (Vec::new(), Vec::new(), Vec::new());
        let concat_width = match c.qkv_mode {
            QkvMode::PerHeadProjection => {
                let dk = d_out / h;
                for i in 0..h {
                    w_q.push(self.glorot(format!("{prefix}.w_q.{i}"), d_q_in, dk));
                    w_k.push(self.glorot(format!("{prefix}.w_k.{i}"), d_kv_in, dk));
                    w_v.push(self.glorot(format!("{prefix}.w_v.{i}"), d_kv_in, dk));
                }
                dk * h
            }
            QkvMode::SplitOnly => d_q_in,
        };
        let w_o = self.glorot(format!("{prefix}.w_o"), concat_width, d_out);
        AttentionParams {
            heads: h,
            mode: c.qkv_mode,
            w_q,
            w_k,
            w_v,
            w_o,
        }
    }

    fn block(&mut self, prefix: &str, c: &ModelConfig, d_in: usize, d: usize, d_ff: usize) -> FfnBlockParams<ParamId> {
        let skip = (d_in != d).then(|| self.glorot(format!("{prefix}.skip"), d_in, d));
        FfnBlockParams {
            activation: c.activation,
            layer_norm: c.layer_norm,
            skip,
            w1: self.glorot(format!("{prefix}.ffn.w1"), d, d_ff),
            b1: self.constant(format!("{prefix}.ffn.b1"), &[1, d_ff], 0.0),
            w2: self.glorot(format!("{prefix}.ffn.w2"), d_ff, d),
            b2: self.constant(format!("{prefix}.ffn.b2"), &[1, d], 0.0),
            ln1_gain: self.constant(format!("{prefix}.ln1.gain"), &[1, d], 1.0),
            ln1_bias: self.constant(format!("{prefix}.ln1.bias"), &[1, d], 0.0),
            ln2_gain: self.constant(format!("{prefix}.ln2.gain"), &[1, d], 1.0),
            ln2_bias: self.constant(format!("{prefix}.ln2.bias"), &[1, d], 0.0),
        }
    }

    fn layer(&mut self, prefix: &str, c: &ModelConfig, d_q_in: usize, d_kv_in: usize, d: usize, d_ff: usize) -> AttentionLayer<ParamId> {
        AttentionLayer {
            attention: self.attention(&format!("{prefix}.attn"), c, d_q_in, d_kv_in, d),
            block: self.block(prefix, c, d_q_in, d, d_ff),
        }
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Linear<ParamId> {
        Linear {
            weight: self.glorot(format!("{prefix}.weight"), d_in, d_out),
            bias: self.constant(format!("{prefix}.bias"), &[1, d_out], 0.0),
        }
    }
}

fn build(c: &ModelConfig, init: Init<'_>) -> Result<ModelWeights, ModelError> {
    c.validate()?;
    let mut b = Builder {
        store: ParamStore::default(),
        init,
    };
    let d = c.d_model;
    let d_ff = c.ffn_width();
    let widths = [c.f1, c.f2];

    let self_attention = [0, 1].map(|i| {
        (0..c.encoder_depth)
            .map(|l| {
                let d_in = if l == 0 { widths[i] } else { d };
                b.layer(&format!("encoder.self.m{}.{l}", i + 1), c, d_in, d_in, d, d_ff)
            })
            .collect::<Vec<_>>()
    });
    let fusion = match c.ablation {
        Ablation::NoCrossAttention => Fusion::Projection(
            [0, 1].map(|i| b.linear(&format!("encoder.proj.m{}", i + 1), d, d)),
        ),
        _ => Fusion::CrossAttention(
            (0..c.encoder_depth)
                .map(|l| [0, 1].map(|i| b.layer(&format!("encoder.cross.m{}.{l}", i + 1), c, d, d, d, d_ff)))
                .collect(),
        ),
    };

    let dd = c.d_dec();
    let start_rows = match c.ablation {
        Ablation::Reconstruction => 1,
        _ => super::FORECAST_HORIZON,
    };
    let decoder = DecoderParams {
        start: b.normal("decoder.start".into(), &[start_rows, dd], 0.02),
        self_attention: b.layer("decoder.self", c, dd, dd, dd, 2 * d_ff),
        cross_attention: b.layer("decoder.cross", c, dd, c.embedding_width(), dd, 2 * d_ff),
        output: b.linear("decoder.out", dd, c.feature_width()),
    };
    Ok(ModelWeights {
        config: c.clone(),
        store: b.store,
        encoder: EncoderParams {
            self_attention,
            fusion,
        },
        decoder,
    })
}

impl ModelWeights {
    /// Glorot-uniform projections, zero biases, unit layer-norm gains and
    /// `N(0, 0.02²)` start tokens, all drawn from one seeded stream.
    pub fn init(c: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = seeded(seed);
        build(c, Init::Random(&mut rng))
    }

    /// Layout for `c` with every tensor zeroed; used when loading.
    pub fn zeroed(c: &ModelConfig) -> Result<Self, ModelError> {
        build(c, Init::Zeros)
    }

    pub fn encoder_view(&self) -> EncoderView<'_> {
        EncoderView {
            config: &self.config,
            store: &self.store,
            params: &self.encoder,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.store.tensors().iter().all(Tensor::is_finite)
    }
}

/// Convenience: initial weights for `c` and `seed`.
pub fn init_weights(c: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    ModelWeights::init(c, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let c = ModelConfig::new(6, 4, 8, 2);
        assert_eq!(init_weights(&c, 3).unwrap(), init_weights(&c, 3).unwrap());
        assert_ne!(init_weights(&c, 3).unwrap().store, init_weights(&c, 4).unwrap().store);
    }

    #[test]
    fn initial_values_are_small_and_finite() {
        let c = ModelConfig::default();
        let w = init_weights(&ModelConfig { f1: 12, f2: 30, ..c }, 0).unwrap();
        assert!(w.is_finite());
        for t in w.store.tensors() {
            assert!(t.data().iter().all(|v| v.abs() < 1.0 + 1e-12));
        }
    }

    #[test]
    fn layer_norms_start_at_identity() {
        let w = init_weights(&ModelConfig::new(3, 2, 4, 2), 1).unwrap();
        for (name, t) in w.store.names().iter().zip(w.store.tensors()) {
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn ablation_changes_tensor_inventory() {
        let c = ModelConfig::new(3, 2, 4, 2);
        let full = init_weights(&c, 0).unwrap();
        let noca = init_weights(&c.clone().with_ablation(Ablation::NoCrossAttention), 0).unwrap();
        let recon = init_weights(&c.with_ablation(Ablation::Reconstruction), 0).unwrap();
        assert!(full.store.id_of("encoder.cross.m1.0.attn.w_o").is_some());
        assert!(full.store.id_of("encoder.proj.m1.weight").is_none());
        assert!(noca.store.id_of("encoder.cross.m1.0.attn.w_o").is_none());
        assert!(noca.store.id_of("encoder.proj.m2.weight").is_some());
        let start = recon.store.get(recon.decoder.start);
        assert_eq!(start.shape(), &[1, 8]);
    }

    #[test]
    fn split_only_has_no_qkv_projections() {
        let c = ModelConfig::new(4, 2, 4, 2).with_qkv_mode(QkvMode::SplitOnly);
        let w = init_weights(&c, 0).unwrap();
        assert!(w.store.names().iter().all(|n| !n.contains(".w_q.")));
    }
}
