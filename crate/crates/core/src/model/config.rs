//! Model hyperparameters.

use crate::error::{CoreError, Result};
use crate::text::vocab::{FIRST_WORD_ID, N_PLACEHOLDERS};
use serde::{Deserialize, Serialize};

/// Output classes of the next-entity head: the 100 placeholders plus
/// `<none>`.
pub const ENTITY_CLASSES: usize = N_PLACEHOLDERS + 1;
pub const ENTITY_NONE_CLASS: usize = N_PLACEHOLDERS;

pub fn entity_class(entity: Option<usize>) -> usize {
    entity.unwrap_or(ENTITY_NONE_CLASS)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_decoder_blocks: usize,
    pub n_encoder_blocks: usize,
    pub d_ff: usize,
    /// K: number of discrete entity states in the codebook.
    pub codebook_size: usize,
    /// D: dimension of state vectors.
    pub state_dim: usize,
    /// infoNCE temperature.
    pub tau: f64,
    /// Scale of the next-entity prediction loss.
    pub lambda1: f64,
    /// Scale of the contrastive loss.
    pub lambda2: f64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Nucleus sampling mass for both generation stages.
    pub top_p: f64,
}

impl ModelConfig {
    /// Desk-scale defaults; loss weights, temperature, and sampling mass
    /// keep their reference values (tau 0.1, lambda 1/1, top-p 0.9).
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_decoder_blocks: 2,
            n_encoder_blocks: 2,
            d_ff: 128,
            codebook_size: 64,
            state_dim: 32,
            tau: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            vocab_size,
            max_seq_len: 256,
            top_p: 0.9,
        }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_decoder_blocks: 1,
            n_encoder_blocks: 1,
            d_ff: 32,
            codebook_size: 8,
            state_dim: 8,
            tau: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            vocab_size,
            max_seq_len: 64,
            top_p: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.codebook_size < 2 {
            return Err(CoreError::Config("codebook_size must be at least 2".into()));
        }
        if self.state_dim < 2 {
            return Err(CoreError::Config("state_dim must be at least 2".into()));
        }
        if self.tau <= 0.0 {
            return Err(CoreError::Config("tau must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoreError::Config("top_p must be in (0, 1]".into()));
        }
        if self.n_decoder_blocks == 0 || self.n_encoder_blocks == 0 || self.d_ff == 0 {
            return Err(CoreError::Config("block counts and d_ff must be positive".into()));
        }
        if self.vocab_size < FIRST_WORD_ID {
            return Err(CoreError::Config(format!(
                "vocab_size {} cannot hold the reserved token block of {}",
                self.vocab_size, FIRST_WORD_ID
            )));
        }
        if self.max_seq_len < 4 {
            return Err(CoreError::Config("max_seq_len too small".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(CoreError::Config("loss scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk(500).validate().unwrap();
        ModelConfig::micro(200).validate().unwrap();
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut c = ModelConfig::desk(500);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn entity_class_mapping() {
        assert_eq!(entity_class(Some(0)), 0);
        assert_eq!(entity_class(Some(99)), 99);
        assert_eq!(entity_class(None), ENTITY_NONE_CLASS);
    }
}
