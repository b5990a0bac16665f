//! Per-view image-to-shape classifier: lift crop features into the
//! wrist-centered token grid by projection, then predict a probability
//! distribution over codebook indices for each token, per class.

mod model;
mod train;
mod types;

pub use model::{build_feature_grid, sample_taps, EncoderModel, EncoderParams};
pub use train::{
    argmax_accuracy, make_samples, train_encoder, weighted_ce_loss, EncoderSample,
    EncoderTrainConfig, EncoderTrainReport,
};
pub use types::{CropWindow, DistributionGrid, ImageBuf, ViewObservation};

use thiserror::Error;

use crate::codec::CodecError;
use crate::geometry::GeometryError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("every token center projects outside the image (wrist pose inconsistent with camera)")]
    GridOutsideImage,
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad encoder checkpoint: {0}")]
    Format(String),
}
