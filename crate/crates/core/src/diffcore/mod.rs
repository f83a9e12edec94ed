//! Differentiable numeric kernels.
//!
//! Forward values are computed eagerly and recorded on a [`Graph`]; calling
//! [`Graph::backward`] replays the tape in reverse. Every kernel is
//! single-threaded with a fixed reduction order, so repeated runs are
//! bit-identical.

mod adam;
mod gradcheck;
mod graph;
pub mod layers;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::BnStats;
pub use gradcheck::{finite_diff_check, param_gradient_check, DEFAULT_FD_EPSILON};
pub use graph::{Gradients, Graph, RunningUpdate, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Momentum of the batchnorm running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance epsilon shared by batchnorm and layernorm.
pub const NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod ops_tests;
