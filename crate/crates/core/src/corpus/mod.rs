//! Pretraining-corpus construction from post dumps.
//!
//! Each dump line is a post; every top-level comment with its reply subtree
//! is one candidate thread. Surviving threads become [`TrainingInstance`]s
//! whose target is the cleaned title followed by the cleaned lead comment.

pub mod clean;
pub mod instance;
pub mod pipeline;
pub mod post;
pub mod tokenizer;

use std::path::PathBuf;

use thiserror::Error;

use crate::conv::ConvError;

pub use clean::{clean_text, MASK_TOKEN, URL_TOKEN};
pub use instance::{
    build_instance, read_instances, read_instances_file, read_shards, resolve_shards, write_instances, FilterConfig,
    Rejection, ShardWriter, SourceMeta, TrainingInstance,
};
pub use pipeline::{build_corpus, CorpusOptions, CorpusStats};
pub use post::{extract_threads, PostFlag, RawComment, RawPost, ThreadExtraction};
pub use tokenizer::{parse_merges, tokenize_summary, tokenize_utterance, SpecialIds, SpecialTokens, Tokenizer};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Tree(#[from] ConvError),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CorpusError {
    /// Attaches a 1-based line number.
    pub fn at_line(self, line: usize) -> Self {
        match self {
            Self::Json { source, .. } => Self::Json { line, source },
            Self::Record { message, .. } => Self::Record { line, message },
            other => Self::Record { line, message: other.to_string() },
        }
    }
}
