//! Transformer model and training configuration, parameter counts, and the
//! unsharded memory footprint of mixed-precision Adam training.
//!
//! Bytes per parameter: 2 for weights, 2 for gradients and 6 for optimizer
//! states, with activations at `2·b·S·(17HL + H + V)`. `bytes_per_element`
//! scales all of them together: weights, gradients and activations by `bpe`,
//! optimizer states by `3·bpe`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and training hyperparameters of a LLaMA-shaped model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: u64,
    pub layers: u64,
    pub heads: u64,
    pub vocab: u64,
    pub seq_len: u64,
    /// Global batch size in tokens.
    #[serde(rename = "global_batch_tokens")]
    pub global_batch: u64,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: u64,
}

fn default_bytes_per_element() -> u64 {
    2
}

/// Built-in model sizes from the footprint table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    B7,
    B13,
    B30,
    B65,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::B7, Preset::B13, Preset::B30, Preset::B65];

    pub fn name(self) -> &'static str {
        match self {
            Preset::B7 => "7b",
            Preset::B13 => "13b",
            Preset::B30 => "30b",
            Preset::B65 => "65b",
        }
    }

    /// Nominal parameter count implied by the preset's name.
    pub fn nominal_params(self) -> f64 {
        match self {
            Preset::B7 => 7e9,
            Preset::B13 => 13e9,
            Preset::B30 => 30e9,
            Preset::B65 => 65e9,
        }
    }

    /// `(hidden_dim, layers, heads)`; vocab is 100k for all of them.
    fn dims(self) -> (u64, u64, u64) {
        match self {
            Preset::B7 => (4096, 32, 32),
            Preset::B13 => (5120, 40, 40),
            Preset::B30 => (6144, 60, 48),
            Preset::B65 => (8192, 80, 64),
        }
    }

    /// The preset architecture with the given sequence length and global
    /// batch (in tokens).
    pub fn config(self, seq_len: u64, global_batch: u64) -> ModelConfig {
        let (hidden_dim, layers, heads) = self.dims();
        ModelConfig {
            hidden_dim,
            layers,
            heads,
            vocab: 100_000,
            seq_len,
            global_batch,
            bytes_per_element: 2,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "7b" => Ok(Preset::B7),
            "13b" => Ok(Preset::B13),
            "30b" => Ok(Preset::B30),
            "65b" => Ok(Preset::B65),
            _ => Err(Error::UnknownPreset(s.to_string())),
        }
    }
}

/// Unsharded memory of one model replica, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub params_bytes: u64,
    pub grads_bytes: u64,
    pub optstate_bytes: u64,
    pub act_bytes: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.params_bytes + self.grads_bytes + self.optstate_bytes + self.act_bytes
    }
}

impl ModelConfig {
    /// Collects every violated invariant instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, value) in [
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("global_batch_tokens", self.global_batch),
            ("bytes_per_element", self.bytes_per_element),
        ] {
            if value == 0 {
                errors.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && !self.hidden_dim.is_multiple_of(self.heads) {
            errors.push(format!(
                "hidden_dim ({}) must be divisible by heads ({})",
                self.hidden_dim, self.heads
            ));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(errors))
        }
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_dim / self.heads
    }

    /// Parameters of a single transformer layer, `12H² + 2H`.
    pub fn layer_param_count(&self) -> u64 {
        layer_param_count(self.hidden_dim)
    }

    /// Embedding plus output head, `2VH`.
    pub fn embedding_param_count(&self) -> u64 {
        2 * self.vocab * self.hidden_dim
    }

    /// `ΨL + 2VH`.
    pub fn total_param_count(&self) -> u64 {
        self.layer_param_count() * self.layers + self.embedding_param_count()
    }

    /// Footprint of an unsharded replica training on micro-batches of `b`
    /// sequences without recomputation.
    pub fn unsharded_footprint(&self, micro_batch: u64) -> Footprint {
        let bpe = self.bytes_per_element;
        let params = self.total_param_count();
        let (h, l, v) = (self.hidden_dim, self.layers, self.vocab);
        Footprint {
            params_bytes: bpe * params,
            grads_bytes: bpe * params,
            optstate_bytes: 3 * bpe * params,
            act_bytes: bpe * micro_batch * self.seq_len * (17 * h * l + h + v),
        }
    }
}

pub fn layer_param_count(hidden_dim: u64) -> u64 {
    12 * hidden_dim * hidden_dim + 2 * hidden_dim
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> ModelConfig {
        ModelConfig {
            hidden_dim: 1,
            layers: 1,
            heads: 1,
            vocab: 1,
            seq_len: 1,
            global_batch: 1,
            bytes_per_element: 2,
        }
    }

    #[test]
    fn layer_params() {
        assert_eq!(layer_param_count(1), 14);
        assert_eq!(layer_param_count(4096), 201_334_784);
        assert_eq!(layer_param_count(8192), 805_322_752);
    }

    #[test]
    fn empty_model_has_no_params() {
        let cfg = ModelConfig { layers: 0, vocab: 0, ..Preset::B7.config(4096, 4096) };
        assert_eq!(cfg.total_param_count(), 0);
    }

    #[test]
    fn unit_activation_bytes() {
        assert_eq!(unit().unsharded_footprint(1).act_bytes, 38);
    }

    #[test]
    fn seven_b_footprint() {
        let fp = Preset::B7.config(4096, 4096).unsharded_footprint(1);
        assert_eq!(fp.params_bytes, 14_523_826_176);
        assert_eq!(fp.grads_bytes, fp.params_bytes);
        assert_eq!(fp.optstate_bytes, 43_571_478_528);
    }

    #[test]
    fn validation_names_every_bad_field() {
        let cfg = ModelConfig { hidden_dim: 0, vocab: 0, ..unit() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("hidden_dim"), "{msg}");
        assert!(msg.contains("vocab"), "{msg}");

        let cfg = ModelConfig { hidden_dim: 10, heads: 4, ..unit() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bytes_per_element_scales_linearly() {
        let base = Preset::B7.config(4096, 4096);
        let wide = ModelConfig { bytes_per_element: 4, ..base };
        let (a, b) = (base.unsharded_footprint(2), wide.unsharded_footprint(2));
        assert_eq!(b.params_bytes, 2 * a.params_bytes);
        assert_eq!(b.optstate_bytes, 2 * a.optstate_bytes);
        assert_eq!(b.act_bytes, 2 * a.act_bytes);
        assert_eq!(b.optstate_bytes, 3 * b.params_bytes);
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("7B".parse::<Preset>().unwrap(), Preset::B7);
        assert!("8b".parse::<Preset>().is_err());
    }
}
