//! Decoder-only transformer with multi-query attention.
//!
//! Pre-norm residual blocks, learned absolute positions, GELU (tanh) MLP and
//! a token embedding tied to the output head. Every query head attends over a
//! single shared key/value head.

mod backward;
pub(crate) mod checkpoint;
mod forward;
mod params;

pub use backward::{backward, backward_accumulate};
pub use checkpoint::{read_tensor_records, write_tensor_record, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use forward::{cross_entropy, forward, ForwardCache, ForwardOutput, LN_EPS};
pub(crate) use forward::gelu;
pub use params::{init_params, GradientBuffers, LayerNormParams, LayerParams, Parameters, Tensor};

use crate::error::{ForgeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    pub num_attention_heads: usize,
    pub num_hidden_layers: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// The 1.1B Java model architecture (49,152-token vocabulary).
    pub fn base_1b() -> Self {
        ModelConfig {
            hidden_size: 2048,
            intermediate_size: 8192,
            max_position_embeddings: 8192,
            num_attention_heads: 16,
            num_hidden_layers: 24,
            vocab_size: 49_152,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("max_position_embeddings", self.max_position_embeddings),
            ("num_attention_heads", self.num_attention_heads),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ForgeError::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.hidden_size % self.num_attention_heads != 0 {
            return Err(ForgeError::Config(format!(
                "hidden_size {} not divisible by num_attention_heads {}",
                self.hidden_size, self.num_attention_heads
            )));
        }
        Ok(())
    }

    /// Exact parameter count of the tied-embedding layout.
    pub fn count_params(&self) -> u64 {
        let h = self.hidden_size as u64;
        let i = self.intermediate_size as u64;
        let d = self.head_dim() as u64;
        let per_layer = 2 * h // ln1
            + h * h + h // q
            + h * 2 * d + 2 * d // shared k/v
            + h * h + h // proj
            + 2 * h // ln2
            + h * i + i // up
            + i * h + h; // down
        self.vocab_size as u64 * h
            + self.max_position_embeddings as u64 * h
            + self.num_hidden_layers as u64 * per_layer
            + 2 * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            hidden_size: 64,
            intermediate_size: 256,
            max_position_embeddings: 128,
            num_attention_heads: 4,
            num_hidden_layers: 2,
            vocab_size: 512,
        }
    }

    #[test]
    fn base_1b_count() {
        let n = ModelConfig::base_1b().count_params();
        assert_eq!(n, 1_137_207_296);
        assert!((1.05e9..=1.2e9).contains(&(n as f64)));
        let bf16_gb = n as f64 * 2.0 / 1e9;
        assert!((bf16_gb - 2.27).abs() / 2.27 < 0.02, "{bf16_gb}");
    }

    #[test]
    fn toy_count_matches_shape_sum() {
        // Hand-summed: 512·64 + 128·64 + 2·(128 + 4160 + 2080 + 4160 + 128 + 16640 + 16448) + 128.
        assert_eq!(toy().count_params(), 32768 + 8192 + 2 * 43744 + 128);
        let p = init_params::<f32>(&toy(), 0).unwrap();
        assert_eq!(p.num_elements() as u64, toy().count_params());
    }

    #[test]
    fn zero_layer_config() {
        let cfg = ModelConfig { num_hidden_layers: 0, ..toy() };
        assert_eq!(cfg.count_params(), 512 * 64 + 128 * 64 + 128);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig { num_attention_heads: 5, ..toy() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 0, ..toy() }.validate().is_err());
        assert!(toy().validate().is_ok());
    }
}
