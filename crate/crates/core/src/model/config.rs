use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. The feature-transform dimension equals
/// `embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub antennas: usize,
    pub subcarriers: usize,
    pub time_slices: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_points: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Temporal conv kernel length; when shorter than `time_slices` the
    /// conv outputs are mean-pooled over time.
    pub kernel_size: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            antennas: 3,
            subcarriers: 114,
            time_slices: 10,
            embed_dim: 512,
            n_heads: 4,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            n_points: 1200,
            ffn_dim: 2048,
            dropout: 0.0,
            kernel_size: 10,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            antennas: 2,
            subcarriers: 4,
            time_slices: 5,
            embed_dim: 8,
            n_heads: 2,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_points: 16,
            ffn_dim: 32,
            dropout: 0.0,
            kernel_size: 5,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn pairs(&self) -> usize {
        self.antennas * self.subcarriers
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("antennas", self.antennas),
            ("subcarriers", self.subcarriers),
            ("time_slices", self.time_slices),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("n_points", self.n_points),
            ("ffn_dim", self.ffn_dim),
            ("kernel_size", self.kernel_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be at least 1")));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model.embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.kernel_size > self.time_slices {
            return Err(Error::config(format!(
                "model.kernel_size {} exceeds time_slices {}",
                self.kernel_size, self.time_slices
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps >= 0.0) {
            return Err(Error::config("model.layer_norm_eps must be >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.antennas, c.subcarriers, c.time_slices), (3, 114, 10));
        assert_eq!((c.embed_dim, c.n_heads, c.n_points), (512, 4, 1200));
        assert_eq!((c.n_encoder_layers, c.n_decoder_layers), (4, 4));
        assert_eq!(c.ffn_dim, 4 * c.embed_dim);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_embedding() {
        let c = ModelConfig {
            embed_dim: 10,
            n_heads: 4,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"embed_dim": 8, "bogus": 1}"#);
        assert!(err.is_err());
    }
}
