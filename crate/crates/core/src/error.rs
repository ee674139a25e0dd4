use thiserror::Error;

use crate::features::FeatureError;
use crate::geometry::GeometryError;
use crate::matching::MatchError;
use crate::synth::SynthError;
use crate::tensor::{BlobError, TensorError};

/// Errors from the composed pipeline, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (pair {pair}, seed {seed}): {source}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        pair: usize,
        seed: u64,
        source: TensorError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
