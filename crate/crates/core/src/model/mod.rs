//! The encoder/decoder pre-training model, its weights and checkpoints.

mod checkpoint;
mod config;
mod forward;
mod weights;

pub use checkpoint::{
    checkpoint_manifest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    CHECKPOINT_VERSION,
};
pub use config::{Ablation, ModelConfig, FORECAST_HORIZON};
pub use forward::{
    bind_encoder, decode, decode_on_graph, encode, encode_on_graph, loss_and_gradients,
    pretrain_forward, pretrain_loss_on_graph, EncoderTrace, EnhancedEmbedding, PretrainPair,
};
pub use weights::{
    init_weights, AttentionLayer, Binder, DecoderParams, EncoderParams, EncoderView, Fusion, Linear,
    ModelWeights, ParamId, ParamStore,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
