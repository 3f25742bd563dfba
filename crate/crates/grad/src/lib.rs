//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine is a tape: each forward pass builds a fresh [`Graph`], binds
//! parameters as leaves, and calls [`Graph::backward`] on a scalar loss.
//! Convolutions are lowered to matrix products (im2col) so the heavy lifting
//! happens in `matrixmultiply`'s gemm kernels.

pub mod check;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{Adam, Moments};
pub use params::{Entry, ParamStore};
pub use tensor::{gemm, Scalar, Tensor};
