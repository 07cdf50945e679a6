use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture descriptor for the conditional velocity field.
///
/// The latent of dimension `latent_dim` is reshaped into `n_tokens()` tokens
/// of width `token_dim`; each block applies pre-norm multi-head self-attention
/// followed by a pre-norm two-layer feedforward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub cond_vocab: usize,
    pub time_freqs: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.latent_dim,
            self.token_dim,
            self.n_blocks,
            self.n_heads,
            self.ffn_hidden,
            self.cond_vocab,
            self.time_freqs,
        ];
        if all.contains(&0) {
            return Err(Error::config("model spec: every count must be >= 1"));
        }
        if !self.latent_dim.is_multiple_of(self.token_dim) {
            return Err(Error::config(format!(
                "model spec: latent_dim {} not divisible by token_dim {}",
                self.latent_dim, self.token_dim
            )));
        }
        if !self.token_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model spec: token_dim {} not divisible by n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.latent_dim / self.token_dim
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            latent_dim: 32,
            token_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            ffn_hidden: 16,
            cond_vocab: 20,
            time_freqs: 6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        let spec = ModelSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.n_tokens(), 4);
        assert_eq!(spec.head_dim(), 4);
    }

    #[test]
    fn non_divisible_heads_rejected() {
        let spec = ModelSpec {
            n_heads: 3,
            ..ModelSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn non_divisible_tokens_rejected() {
        let spec = ModelSpec {
            token_dim: 7,
            ..ModelSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
