//! Model hyperparameters.

use alloc::string::String;

use crate::corpus::NUM_SPECIAL_TOKENS;
use crate::error::{CoreError, Result};

/// Decoding strategy for candidate generation. Greedy is the default so
/// inference is reproducible; top-k sampling is available behind config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

/// Number of role embeddings: context, response, latent slot.
pub const NUM_ROLES: usize = 3;

pub const ROLE_CONTEXT: u32 = 0;
pub const ROLE_RESPONSE: u32 = 1;
pub const ROLE_LATENT: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub latent_k: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub max_response: usize,
    /// Gumbel-Softmax temperature used during stage-2 generation training.
    pub temperature: f64,
    pub decode: DecodeStrategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 128,
            latent_k: 4,
            vocab_size: 512,
            max_context: 128,
            max_response: 128,
            temperature: 1.0,
            decode: DecodeStrategy::Greedy,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(CoreError::config("layers, heads and dim must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(CoreError::config(alloc::format!(
                "dim {} not divisible by heads {}",
                self.dim,
                self.heads
            )));
        }
        if self.latent_k < 2 {
            return Err(CoreError::config("latent_k must be at least 2"));
        }
        if self.vocab_size <= NUM_SPECIAL_TOKENS {
            return Err(CoreError::config("vocab smaller than the special tokens"));
        }
        if self.max_context == 0 || self.max_response == 0 {
            return Err(CoreError::config("sequence budgets must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::config("temperature must be positive"));
        }
        Ok(())
    }

    /// Longest assembled sequence: slot + context + bou + response + eou.
    pub fn max_seq_len(&self) -> usize {
        1 + self.max_context + 1 + self.max_response + 1
    }

    /// Closed-form parameter count; the model reports the same number.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let v = self.vocab_size;
        let k = self.latent_k;
        let p = self.max_seq_len();
        let embeddings = v * d + p * d + NUM_ROLES * d + k * d;
        let per_block = 12 * d * d + 13 * d;
        let heads = (k * d + k) + (v * d + v) + (d + 1);
        embeddings + self.layers * per_block + 2 * d + heads
    }

    pub fn decode_str(&self) -> String {
        match self.decode {
            DecodeStrategy::Greedy => String::from("greedy"),
            DecodeStrategy::TopK { k, temperature } => {
                alloc::format!("topk:{k}:{temperature:?}")
            }
        }
    }

    pub fn parse_decode(s: &str) -> Result<DecodeStrategy> {
        if s == "greedy" {
            return Ok(DecodeStrategy::Greedy);
        }
        if let Some(rest) = s.strip_prefix("topk:") {
            if let Some((k, t)) = rest.split_once(':') {
                let k = k
                    .parse()
                    .map_err(|_| CoreError::config("bad top-k count"))?;
                let temperature = t
                    .parse()
                    .map_err(|_| CoreError::config("bad top-k temperature"))?;
                return Ok(DecodeStrategy::TopK { k, temperature });
            }
        }
        Err(CoreError::config(alloc::format!(
            "unknown decode strategy '{s}'"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.dim = 130; // not divisible by 4 heads
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.latent_k = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn decode_strategy_round_trips() {
        let mut c = ModelConfig::default();
        assert_eq!(c.decode_str(), "greedy");
        c.decode = DecodeStrategy::TopK {
            k: 5,
            temperature: 0.8,
        };
        let parsed = ModelConfig::parse_decode(&c.decode_str()).unwrap();
        assert_eq!(parsed, c.decode);
    }
}
