//! Functional generalized empirical likelihood (FGEL) estimation for
//! conditional moment restrictions E[ψ(X; θ) | Z] = 0.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod fgel_kernel;
pub mod fgel_neural;
pub mod kernel;
pub mod model_selection;
pub mod optimize;
pub mod oracle;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use error::{FgelError, Result};
