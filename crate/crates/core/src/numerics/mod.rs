//! Dense matrices, small fully connected networks with manual backpropagation, and the
//! finite-difference harness that checks them.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod ops;

pub use gradcheck::{finite_diff_check, finite_diff_check_piecewise, BlockReport, CheckReport};
pub use matrix::{dot, norm, DenseMatrix};
pub use mlp::{
    mlp_backward, mlp_forward, ForwardTrace, HiddenActivation, MlpParams, MlpSpec, Network,
    OutputActivation,
};
pub use ops::{clamped_ln, cosine, sigmoid, softmax_rows, Cosine, LOG_EPS};
