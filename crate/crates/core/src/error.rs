//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{context}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("size mismatch: {context}: {h_a}x{w_a} vs {h_b}x{w_b}")]
    SizeMismatch {
        context: String,
        h_a: usize,
        w_a: usize,
        h_b: usize,
        w_b: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate region: mask weight sum {sum} below threshold {threshold}")]
    DegenerateRegion { sum: f64, threshold: f64 },
    #[error("empty foreground mask for record {id}")]
    EmptyForeground { id: String },
    #[error("ground truth is all zero; weighted MAE undefined")]
    AllZeroGroundTruth,
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { term: String, step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash mismatch: file {file}, model {model}")]
    ConfigHashMismatch { file: String, model: String },
    #[error("unmatched prediction/ground-truth ids: {0:?}")]
    UnmatchedIds(Vec<String>),
}
