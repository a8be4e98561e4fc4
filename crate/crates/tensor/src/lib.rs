//! Dense `f32` tensors with tape-based reverse-mode differentiation, the
//! convolution / normalization / attention blocks used by the scene and latent
//! networks, and Adam/AdamW.
//!
//! Parameters live in a [`ParamStore`]; each training step records a fresh
//! [`Graph`], binds parameters into it, and calls [`Graph::backward`].

mod graph;
mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod tensor;

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;

pub use graph::{BinaryKind, Gradients, Graph, SparseMap, UnaryKind, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::{numel, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("computation graph contains a cycle")]
    Cycle,
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
