//! Tensors, reverse-mode autodiff, and optimizers, generic over [`Scalar`].

mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, Ema};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
