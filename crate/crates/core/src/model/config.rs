use serde::{Deserialize, Serialize};
use thiserror::Error;

use layerforge_autodiff::TensorError;

/// Background hue tokens and the hue (degrees) each one names.
pub const HUE_TOKENS: [(&str, f64); 8] = [
    ("red", 0.0),
    ("orange", 30.0),
    ("yellow", 60.0),
    ("green", 120.0),
    ("teal", 180.0),
    ("blue", 220.0),
    ("purple", 270.0),
    ("pink", 320.0),
];

pub const ARRANGEMENT_TOKENS: [&str; 4] = ["row", "column", "diagonal", "scattered"];

pub fn hue_degrees(token: &str) -> Option<f64> {
    HUE_TOKENS.iter().find(|(n, _)| *n == token).map(|&(_, h)| h)
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token dim {got} does not match the model's {expected}")]
    TokenDim { expected: usize, got: usize },
    #[error("unknown {field} token {token:?}")]
    UnknownPrompt { field: &'static str, token: String },
    #[error("condition layer axis {axis} exceeds max_unlocked_layers {max}")]
    LayerAxis { axis: u32, max: u32 },
    #[error("timestep {0} outside [0, 1]")]
    Timestep(f64),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_blocks: usize,
    pub patch: usize,
    /// Rotary dims per head for (layer axis, x, y); each even, summing to `head_dim`.
    pub axis_dims: [usize; 3],
    pub rope_base: f64,
    pub mlp_ratio: usize,
    pub time_freq_dim: usize,
    pub hue_vocab: Vec<String>,
    pub arrangement_vocab: Vec<String>,
    pub max_unlocked_layers: u32,
    pub lora_rank: usize,
    pub lora_alpha: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            n_blocks: 4,
            patch: 4,
            axis_dims: [4, 6, 6],
            rope_base: 10_000.0,
            mlp_ratio: 4,
            time_freq_dim: 64,
            hue_vocab: HUE_TOKENS.iter().map(|(n, _)| n.to_string()).collect(),
            arrangement_vocab: ARRANGEMENT_TOKENS.iter().map(|n| n.to_string()).collect(),
            max_unlocked_layers: 8,
            lora_rank: 8,
            lora_alpha: 8.0,
        }
    }
}

impl ModelConfig {
    /// Latent values per token, `patch²·3`.
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn lora_scaling(&self) -> f32 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f32
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 || self.patch == 0 {
            return fail("d_model, n_heads, n_blocks and patch must be positive".into());
        }
        if self.n_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads·head_dim = {}·{} != d_model {}",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if self.axis_dims.iter().any(|d| d % 2 != 0) {
            return fail(format!("axis_dims {:?} must all be even", self.axis_dims));
        }
        if self.axis_dims.iter().sum::<usize>() != self.head_dim {
            return fail(format!(
                "axis_dims {:?} must sum to head_dim {}",
                self.axis_dims, self.head_dim
            ));
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return fail(format!("time_freq_dim {} must be even and positive", self.time_freq_dim));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        if self.hue_vocab.is_empty() || self.arrangement_vocab.is_empty() {
            return fail("prompt vocabularies must be non-empty".into());
        }
        if !self.lora_alpha.is_finite() {
            return fail("lora_alpha must be finite".into());
        }
        Ok(())
    }

    pub fn hue_index(&self, token: &str) -> Result<usize, ModelError> {
        self.hue_vocab
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| ModelError::UnknownPrompt {
                field: "background_hue",
                token: token.to_owned(),
            })
    }

    pub fn arrangement_index(&self, token: &str) -> Result<usize, ModelError> {
        self.arrangement_vocab
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| ModelError::UnknownPrompt {
                field: "arrangement",
                token: token.to_owned(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.token_dim(), 48);
        assert_eq!(c.lora_scaling(), 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.axis_dims = [5, 5, 6];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.head_dim = 8;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.axis_dims = [4, 4, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn prompt_lookup() {
        let c = ModelConfig::default();
        assert_eq!(c.hue_index("teal").unwrap(), 4);
        assert!(matches!(
            c.arrangement_index("spiral"),
            Err(ModelError::UnknownPrompt { field: "arrangement", .. })
        ));
        assert_eq!(hue_degrees("blue"), Some(220.0));
    }
}
