//! Minimal reverse-mode autodiff for convolutional segmentation networks.
//!
//! Tensors are dense `f32` in NCHW layout. A [`Graph`] records one forward
//! pass against a [`ParamStore`]; [`Graph::backward`] returns parameter
//! gradients that an [`Adam`] optimiser applies back to the store.

mod graph;
pub mod init;
mod kernels;
mod optim;
mod store;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use store::{NamedTensor, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownName(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Sub-pixel rearrangement `(N, C*r*r, H, W) -> (N, C, r*H, r*W)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    graph::pixel_shuffle(x, r)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    graph::pixel_unshuffle(x, r)
}
