//! Monte Carlo laboratory for semilinear stochastic evolution equations with Dini-continuous
//! drift, worked in a truncated eigenbasis of a diagonal negative operator.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod acceptance;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod girsanov;
pub mod mild;
pub mod ou;
pub mod quadrature;
pub mod regularization;
pub mod rng;
pub mod runner;
pub mod spectral;
pub mod stats;
pub mod testfn;
pub mod verify;

pub use error::{LabError, Result};
pub use rng::{Module, StreamKey};
pub use spectral::{EigenLaw, ModeVector, SpectralOperator};
pub use stats::Estimate;
