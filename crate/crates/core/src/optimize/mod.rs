//! Full-batch optimizers shared by the estimators.

mod lbfgs;
mod oadam;

pub use lbfgs::{lbfgs_minimize, lbfgs_minimize_feasible, LbfgsConfig, LbfgsResult, Termination};
pub use oadam::{oadam_step, OAdamConfig, OAdamState};
