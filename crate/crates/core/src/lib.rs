//! Value processes, backward equations and optimal strategies for utility
//! maximization in incomplete diffusion markets.

// `!(x > 0.0)` is used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod cli;
pub mod error;
pub mod market;
pub mod pde;
pub mod rng;
pub mod utility;
pub mod valuation;
pub mod verify;

pub use error::{LabError, Result};
