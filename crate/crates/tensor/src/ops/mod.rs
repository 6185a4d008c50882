pub mod conv;
pub mod deform;
mod elementwise;
mod norm;
mod pool;
mod reduce;
mod shape;

pub(crate) use elementwise::{sigmoid, softplus};
pub use norm::{BN_EPS, BN_MOMENTUM, LN_EPS};
