//! Koopman lifted linear models and safe model-predictive control for
//! articulated robots.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod floatbase;
pub mod harness;
pub mod kinematics;
pub mod koopnet;
pub mod mpc;
pub mod qp;
pub mod safety;
pub mod tuner;

pub use error::{Error, Result};
