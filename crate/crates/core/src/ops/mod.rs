//! Differentiable operations, implemented as methods on [`Var`](crate::autodiff::Var).

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod shape;
pub mod softmax;

pub use conv::Conv2dSpec;
pub use elementwise::sigmoid;
pub use linalg::matmul_plain;
pub use norm::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
