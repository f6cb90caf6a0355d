use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::attention::{Activation, QkvMode};

/// Which variant of the pre-training architecture to build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Cross-attention replaced by a per-modality linear map.
    NoCrossAttention,
    /// Decoder reconstructs the encoder input instead of forecasting.
    Reconstruction,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::Full,
        Ablation::NoCrossAttention,
        Ablation::Reconstruction,
    ];

    /// Short label used in reports and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCrossAttention => "no-ca",
            Ablation::Reconstruction => "recon",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-ca" | "no_cross_attention" => Ok(Ablation::NoCrossAttention),
            "recon" | "reconstruction" => Ok(Ablation::Reconstruction),
            other => Err(format!("unknown ablation `{other}` (full|no-ca|recon)")),
        }
    }
}

/// Number of future time points predicted by the forecasting decoder.
pub const FORECAST_HORIZON: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Features in modality 1.
    pub f1: usize,
    /// Features in modality 2.
    pub f2: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Encoder FFN width; the decoder uses twice this. 0 means `4·d_model`.
    pub d_ff: usize,
    pub dropout: f64,
    pub qkv_mode: QkvMode,
    pub ablation: Ablation,
    pub layer_norm: bool,
    pub activation: Activation,
    /// Stacked self-attention and cross-attention layers per modality.
    pub encoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            f1: 1,
            f2: 1,
            d_model: 16,
            heads: 4,
            d_ff: 0,
            dropout: 0.0,
            qkv_mode: QkvMode::PerHeadProjection,
            ablation: Ablation::Full,
            layer_norm: true,
            activation: Activation::Relu,
            encoder_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn new(f1: usize, f2: usize, d_model: usize, heads: usize) -> Self {
        Self {
            f1,
            f2,
            d_model,
            heads,
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_qkv_mode(mut self, mode: QkvMode) -> Self {
        self.qkv_mode = mode;
        self
    }

    pub fn ffn_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    /// Decoder width: matches the Enhanced Embedding so cross-attention
    /// needs no adapter.
    pub fn d_dec(&self) -> usize {
        2 * self.d_model
    }

    pub fn embedding_width(&self) -> usize {
        2 * self.d_model
    }

    pub fn feature_width(&self) -> usize {
        self.f1 + self.f2
    }

    /// Decoder output rows for an encoder input of `t_in` points.
    pub fn horizon(&self, t_in: usize) -> usize {
        match self.ablation {
            Ablation::Reconstruction => t_in,
            _ => FORECAST_HORIZON,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.f1 == 0 || self.f2 == 0 {
            return bad(format!("both modalities need features (f1={}, f2={})", self.f1, self.f2));
        }
        if self.heads == 0 || self.d_model == 0 {
            return bad("d_model and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.qkv_mode == QkvMode::SplitOnly {
            for (name, f) in [("f1", self.f1), ("f2", self.f2)] {
                if f % self.heads != 0 {
                    return bad(format!(
                        "split-only attention needs {name}={f} divisible by {} heads",
                        self.heads
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.encoder_depth == 0 {
            return bad("encoder_depth must be at least 1".into());
        }
        Ok(())
    }
}
