//! Personalized Bayesian federated learning with posterior fine-tuning.

// Negated float comparisons are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
mod error;
pub mod federation;
pub mod flows;
pub mod harness;
pub mod laplace;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
