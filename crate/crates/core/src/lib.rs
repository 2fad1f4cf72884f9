//! Co-simulation lab for false-data-injection attacks and moving-target
//! defenses on power-system state estimation.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod casefile;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod learning;
pub mod mtd;
pub mod powerflow;

pub use error::{Error, Result};
