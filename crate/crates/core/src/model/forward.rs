use super::{
    AttentionLayer, Binder, DecoderParams, EncoderParams, EncoderView, Fusion, ModelConfig,
    ModelError, ModelWeights, ParamId,
};
use crate::attention::{causal_mask, multi_head, positional_encoding, residual_ffn_block, Dropout, Mask};
use crate::tensor::{Graph, Tensor, Var};

/// The encoder output: one `2·d_model` row per input time point.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedEmbedding(Tensor);

impl EnhancedEmbedding {
    pub fn new(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn time_points(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}

/// Intermediate encoder nodes, exposed for sensitivity experiments.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTrace {
    /// Self-attention outputs per modality.
    pub self_attended: [Var; 2],
    /// Cross-attention (or projection) outputs per modality.
    pub fused: [Var; 2],
    pub embedding: Var,
}

fn attention_layer(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    layer: &AttentionLayer<Var>,
    mask: Option<&Mask>,
    dropout: Option<&mut Dropout>,
) -> Result<Var, ModelError> {
    let attn = multi_head(g, x_q, x_kv, &layer.attention, mask)?;
    Ok(residual_ffn_block(g, x_q, attn.output, &layer.block, dropout)?)
}

/// Registers the encoder weights of `view` on `g`.
pub fn bind_encoder(g: &mut Graph, view: EncoderView<'_>) -> EncoderParams<Var> {
    view.params.map(|id| g.param(view.store.get(*id)))
}

/// Builds the encoder on `g` for one sample.
pub fn encode_on_graph(
    g: &mut Graph,
    m1: Var,
    m2: Var,
    p: &EncoderParams<Var>,
    c: &ModelConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<EncoderTrace, ModelError> {
    let (s1, s2) = (g.value(m1).shape().to_vec(), g.value(m2).shape().to_vec());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != s2[0] {
        return Err(ModelError::Input(format!(
            "modalities must share the time axis, got {s1:?} and {s2:?}"
        )));
    }
    if s1[1] != c.f1 || s2[1] != c.f2 {
        return Err(ModelError::Input(format!(
            "feature widths {}/{} do not match config {}/{}",
            s1[1], s2[1], c.f1, c.f2
        )));
    }
    let t = s1[0];
    if t == 0 {
        return Err(ModelError::Input("encoder input has no time points".into()));
    }

    let mut sa = [m1, m2];
    for (i, x) in sa.iter_mut().enumerate() {
        let pe = g.constant(positional_encoding(t, g.value(*x).cols()));
        let mut h = g.add(*x, pe)?;
        for layer in &p.self_attention[i] {
            h = attention_layer(g, h, h, layer, None, dropout.as_deref_mut())?;
        }
        *x = h;
    }

    let fused = match &p.fusion {
        Fusion::CrossAttention(layers) => {
            let [mut a, mut b] = sa;
            for [la, lb] in layers {
                let na = attention_layer(g, a, b, la, None, dropout.as_deref_mut())?;
                let nb = attention_layer(g, b, a, lb, None, dropout.as_deref_mut())?;
                a = na;
                b = nb;
            }
            [a, b]
        }
        Fusion::Projection(maps) => {
            let mut out = sa;
            for (o, lin) in out.iter_mut().zip(maps) {
                let y = g.matmul(*o, lin.weight)?;
                *o = g.add_row(y, lin.bias)?;
            }
            out
        }
    };
    let embedding = g.concat_cols(fused[0], fused[1])?;
    Ok(EncoderTrace {
        self_attended: sa,
        fused,
        embedding,
    })
}

/// Builds the decoder on `g`, returning `[horizon × (F1+F2)]` predictions.
pub fn decode_on_graph(
    g: &mut Graph,
    embedding: Var,
    p: &DecoderParams<Var>,
    c: &ModelConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, ModelError> {
    let e = g.value(embedding);
    if e.cols() != c.embedding_width() {
        return Err(ModelError::Input(format!(
            "embedding width {} does not match 2·d_model = {}",
            e.cols(),
            c.embedding_width()
        )));
    }
    let horizon = c.horizon(e.rows());
    let start_rows = g.value(p.start).rows();
    let start = if start_rows == horizon {
        p.start
    } else if start_rows == 1 {
        g.repeat_rows(p.start, horizon)?
    } else {
        return Err(ModelError::Input(format!(
            "{start_rows} start tokens cannot cover horizon {horizon}"
        )));
    };
    let pe = g.constant(positional_encoding(horizon, c.d_dec()));
    let x = g.add(start, pe)?;
    let mask = causal_mask(horizon);
    let y = attention_layer(g, x, x, &p.self_attention, Some(&mask), dropout.as_deref_mut())?;
    let y = attention_layer(g, y, embedding, &p.cross_attention, None, dropout.as_deref_mut())?;
    let out = g.matmul(y, p.output.weight)?;
    Ok(g.add_row(out, p.output.bias)?)
}

/// Task-agnostic embedding of one aligned two-modality sequence.
pub fn encode(m1: &Tensor, m2: &Tensor, w: EncoderView<'_>) -> Result<EnhancedEmbedding, ModelError> {
    let mut g = Graph::new();
    let p = w.params.map(|id| g.constant(w.store.get(*id).clone()));
    let (a, b) = (g.constant(m1.clone()), g.constant(m2.clone()));
    let trace = encode_on_graph(&mut g, a, b, &p, w.config, None)?;
    let out = g.value(trace.embedding).clone();
    if !out.is_finite() {
        return Err(ModelError::NonFinite("encoder output".into()));
    }
    Ok(EnhancedEmbedding(out))
}

/// Decoder predictions for an embedding.
pub fn decode(e: &EnhancedEmbedding, w: &ModelWeights) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let p = w.decoder.map(|id| g.constant(w.store.get(*id).clone()));
    let ev = g.constant(e.tensor().clone());
    let out = decode_on_graph(&mut g, ev, &p, &w.config, None)?;
    Ok(g.value(out).clone())
}

/// Encoder input and decoder target for one pre-training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPair {
    pub m1: Tensor,
    pub m2: Tensor,
    /// `[horizon × (F1+F2)]`: modality-1 columns then modality-2 columns.
    pub target: Tensor,
}

fn check_target(pair: &PretrainPair, c: &ModelConfig) -> Result<(), ModelError> {
    let want = [c.horizon(pair.m1.rows()), c.feature_width()];
    if pair.target.shape() != want {
        return Err(ModelError::Input(format!(
            "target shape {:?}, expected {want:?}",
            pair.target.shape()
        )));
    }
    Ok(())
}

/// Builds encoder, decoder and the MSE loss for one sample on a fresh
/// graph, binding every weight through `binder`.
fn loss_graph(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    pair: &PretrainPair,
    w: &ModelWeights,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, ModelError> {
    check_target(pair, &w.config)?;
    let mut bind = |id: &ParamId| binder.bind(g, *id);
    let enc = w.encoder.map(&mut bind);
    let dec = w.decoder.map(&mut bind);
    let (a, b) = (g.constant(pair.m1.clone()), g.constant(pair.m2.clone()));
    let trace = encode_on_graph(g, a, b, &enc, &w.config, dropout.as_deref_mut())?;
    let pred = decode_on_graph(g, trace.embedding, &dec, &w.config, dropout)?;
    let target = g.constant(pair.target.clone());
    Ok(g.mse(pred, target)?)
}

/// Builds the pre-training loss on `g` with every weight taken from
/// `params`, which must be indexed like `w.store`. Used for gradient checks
/// over the whole parameter set.
pub fn pretrain_loss_on_graph(
    g: &mut Graph,
    params: &[Var],
    pair: &PretrainPair,
    w: &ModelWeights,
) -> Result<Var, ModelError> {
    check_target(pair, &w.config)?;
    if params.len() != w.store.len() {
        return Err(ModelError::Input(format!(
            "{} parameter vars for {} tensors",
            params.len(),
            w.store.len()
        )));
    }
    let enc = w.encoder.map(|id| params[id.index()]);
    let dec = w.decoder.map(|id| params[id.index()]);
    let (a, b) = (g.constant(pair.m1.clone()), g.constant(pair.m2.clone()));
    let trace = encode_on_graph(g, a, b, &enc, &w.config, None)?;
    let pred = decode_on_graph(g, trace.embedding, &dec, &w.config, None)?;
    let target = g.constant(pair.target.clone());
    Ok(g.mse(pred, target)?)
}

/// Mean squared error between the decoder output and the target.
pub fn pretrain_forward(pair: &PretrainPair, w: &ModelWeights) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let mut binder = Binder::new(&w.store);
    let loss = loss_graph(&mut g, &mut binder, pair, w, None)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(ModelError::NonFinite("pre-training loss".into()));
    }
    Ok(v)
}

/// Loss and its gradient for every tensor in `w.store` (store order).
pub fn loss_and_gradients(
    pair: &PretrainPair,
    w: &ModelWeights,
    dropout: Option<&mut Dropout>,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut g = Graph::new();
    let mut binder = Binder::new(&w.store);
    let loss = loss_graph(&mut g, &mut binder, pair, w, dropout)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(ModelError::NonFinite("pre-training loss".into()));
    }
    let grads = g.backward(loss)?;
    Ok((v, binder.gather(&grads)))
}
