//! Sentence splitting, embeddings, and batch sampling strategies.

mod embedder;
mod sampler;
mod sentences;

use thiserror::Error;

pub use embedder::{
    embed_batch, embedder_from_config, tokenize, CachedEmbedder, Embedder, EmbedderConfig, EmbedderMode,
    HashEmbedder, RemoteEmbedder,
};
pub use sampler::{
    cosine, coverage_scores, keyword_upsample, select_batch, CoverageScore, SamplingStrategy, SentenceIndex,
    SentenceSource, SentenceVector, SentenceVectors, StaticSentences,
};
pub use sentences::split_sentences;

use crate::transport::RequestError;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text is empty or whitespace")]
    EmptyText,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vector lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("embedding dimension {got} does not match configured {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("endpoint returned {got} embeddings for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding request failed: {0}")]
    Request(#[from] RequestError),
    #[error("could not decode embedding response: {0}")]
    Decode(String),
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error("keyword list is empty")]
    EmptyKeywords,
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("pool exhausted: {requested} requested, {available} available")]
    PoolExhausted { requested: usize, available: usize },
    #[error("unknown narrative id {0:?}")]
    UnknownId(String),
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
}
