//! Restricted maximum likelihood fitting with a covariance-structure fallback ladder.

mod fit;
mod objective;
mod optimize;

pub use fit::{fit_design, fit_mmrm, fit_mmrm_with, FitOptions, FitResult, OptimizerTrace, StructureAttempt};
pub use objective::{gls_solve, precision_matrix, reml_neg2loglik, RemlEvaluation, RemlObjective};
