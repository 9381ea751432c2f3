//! Adaptive gradient optimizers (SGD, RMSProp, AdaGrad, AdaDelta, ADAM) viewed
//! as discrete-time dynamical systems.
//!
//! The crate computes fixed-point eigenvalues in closed form and numerically,
//! checks per-family hyperparameter bounds, verifies the perturbation
//! estimates behind local convergence by sampling, and runs the trajectory
//! and hyperparameter-sweep experiments.
// `!(a < b)` is used on purpose so that NaN fails the test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod objectives;
pub mod perturbation;
pub mod stability;

pub use error::{Error, Result};
