//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation produced a NaN or infinite value. Non-finite values are
    /// surfaced here instead of propagating silently through the graph.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// `backward` requires a scalar loss.
    #[error("backward requires a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    /// Cosine similarity (and row normalization) need nonzero vectors.
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("unknown category: {0}")]
    UnknownCategory(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset files that do not follow the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Training diverged: the loss went non-finite or blew past the
    /// divergence ceiling.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
