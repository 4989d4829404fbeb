use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ModelError;

/// Whether the relation embedding table is shared by all utterance-encoder
/// layers or owned per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadEmbeddingScope {
    Global,
    PerLayer,
}

/// What the decoder cross-attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// Every token state plus its utterance's encoded state.
    TokenResidual,
    /// One row per utterance: encoded state plus the utterance encoder input.
    UtteranceLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub feed_forward: usize,
    pub vocab_size: usize,
    /// Relative depth differences are clipped to `[-clip_k, clip_k]`.
    pub clip_k: usize,
    pub dropout: f64,
    pub max_utterances: usize,
    pub max_utterance_tokens: usize,
    pub max_summary_tokens: usize,
    pub layer_norm_eps: f64,
    pub thread_embeddings: ThreadEmbeddingScope,
    pub decoder_memory: MemoryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            num_heads: 12,
            hidden: 768,
            feed_forward: 3072,
            vocab_size: 50265,
            clip_k: 9,
            dropout: 0.1,
            max_utterances: 124,
            max_utterance_tokens: 200,
            max_summary_tokens: 256,
            layer_norm_eps: 1e-5,
            thread_embeddings: ThreadEmbeddingScope::Global,
            decoder_memory: MemoryMode::TokenResidual,
        }
    }
}

impl ModelConfig {
    /// A tiny configuration for tests and gradient checks.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            hidden: 16,
            feed_forward: 32,
            vocab_size,
            clip_k: 3,
            dropout: 0.0,
            max_utterances: 32,
            max_utterance_tokens: 32,
            max_summary_tokens: 32,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    /// Rows in a relation embedding table: one per clipped offset plus the
    /// unrelated entry.
    pub fn num_thread_embeddings(&self) -> usize {
        2 * self.clip_k + 2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden == 0 || self.feed_forward == 0 {
            return fail("layer, head, hidden and feed-forward sizes must be positive");
        }
        if self.hidden % self.num_heads != 0 {
            return fail("hidden size must be divisible by the number of heads");
        }
        if self.vocab_size == 0 || self.clip_k == 0 {
            return fail("vocab_size and clip_k must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.max_utterances == 0 || self.max_utterance_tokens < 2 || self.max_summary_tokens < 2 {
            return fail("length limits too small");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 64);
        assert_eq!(c.num_thread_embeddings(), 20);
        assert_eq!((c.max_utterances, c.max_utterance_tokens, c.max_summary_tokens), (124, 200, 256));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            num_heads: 5,
            ..ModelConfig::toy(10)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::toy(10);
        let b = ModelConfig { clip_k: 4, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
