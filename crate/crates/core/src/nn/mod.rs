//! Minimal differentiable computation substrate: dense tensors, the layer
//! set needed by the shape codec and view encoder, reverse-mode gradients
//! on an explicit tape, and SGD with momentum.
//!
//! Every layer's analytic gradient is validated against central finite
//! differences (see the `grad_check` tests and the acceptance suite).

mod checkpoint;
mod gemm;
#[cfg(test)]
mod grad_check;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_params, write_params};
pub use gemm::{col2im2d, col2im3d, gemm_nn, gemm_nt, gemm_tn, im2col2d, im2col3d, ConvGeom};
pub use layers::{ConvSpec, Layer, LayerSpec, Stack};
pub use optim::{sgd_step, OptimizerState};
pub use tape::{Gradients, NodeId, Tape, Taps};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("backward called twice without a new forward pass")]
    BackwardConsumed,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite loss value")]
    NonFiniteLoss,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}
