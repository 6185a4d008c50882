//! Dense `f64` tensors, a recorded operation tape for reverse-mode
//! differentiation, and the layers the despeckling network is assembled from.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod linalg;
pub mod nn;
pub mod ops;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{BackwardCtx, BackwardOp, Graph, Mode, StatUpdate, Var};
pub use ops::conv::Conv2dSpec;
pub use ops::deform::bilinear_sample;
pub use params::{Init, Param, ParamBuilder, ParamTree};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    ops::sigmoid(x)
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    ops::softplus(x)
}
