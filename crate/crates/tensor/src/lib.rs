//! Small reverse-mode automatic differentiation engine for NHWC image
//! models, backed by `matrixmultiply` GEMM kernels.

mod conv;
pub mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use graph::{Grads, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
