//! Dense numerical kernel: matrices, tape-based reverse-mode gradients, the
//! finite-difference oracle, and power iteration for operator norms.

pub mod fd;
pub mod matrix;
pub mod power;
pub mod tape;

pub use fd::finite_difference_gradient;
pub use matrix::DenseMatrix;
pub use power::{power_iteration_spectral_norm, spectral_norm, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL};
pub use tape::{affine_forward, Gradients, NodeId, ParamId, ParamStore, Tape};
