//! Minimal CPU reverse-mode autograd over NCHW `f32` tensors.
//!
//! Just enough machinery for small convolutional denoisers: convolutions
//! backed by `matrixmultiply` sgemm, group normalization, single-head
//! self-attention and a handful of pointwise ops. Gradients can be requested
//! for graph inputs, for parameters, or for both; asking only for input
//! gradients skips all weight-gradient gemms.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{ConvSpec, Grads, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
