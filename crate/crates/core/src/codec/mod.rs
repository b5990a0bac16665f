//! Patch-wise vector-quantized T-SDF autoencoder: a conv3d encoder maps
//! local patches to continuous codes, codes snap to their nearest codebook
//! entry, and a transposed-conv decoder reconstructs the grid. One model
//! per class (hand, object).

mod model;
mod train;

pub use model::{vq_loss_value, Codebook, CodecModel, CodecParams, TokenGrid};
pub use train::{train_codec, CodecTrainConfig, EpochLog, TrainReport};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("grid resolution {0} not divisible by patch size {1}")]
    ResolutionMismatch(usize, usize),
    #[error("token index {0} out of range (codebook size {1})")]
    TokenOutOfRange(u32, usize),
    #[error("token grid resolution {0} does not match model ({1})")]
    TokenResolution(usize, usize),
    #[error("training set too small: {0} shapes (minimum {1})")]
    DatasetTooSmall(usize, usize),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid codec configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad codec checkpoint: {0}")]
    Format(String),
}
