//! Prognostic-covariate-adjusted mixed models for repeated measures.
//!
//! The crate covers the full analysis path for a longitudinal randomized
//! trial whose participants carry time-matched prognostic scores:
//!
//! * [`trial_data`]: long-format ingestion, validation and design construction;
//! * [`covariance`]: unstructured / Toeplitz / compound-symmetry residual covariances;
//! * [`reml`]: restricted maximum likelihood with a fallback ladder;
//! * [`inference`]: sandwich variance, Satterthwaite degrees of freedom and the
//!   final-visit treatment effect;
//! * [`power`]: closed-form power and sample-size planning;
//! * [`simulation`]: scenario generators, Monte Carlo operating characteristics,
//!   the subsampling study and effective-sample-size checks.
//!
//! Estimation code is generic over [`Real`] (`f32`/`f64`); the aliases below
//! fix the scalar to `f64`, which is what the simulation harness and CLI use.

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod distributions;
pub mod error;
pub mod inference;
mod linalg;
pub mod power;
pub mod reml;
pub mod scalar;
pub mod simulation;
pub mod trial_data;

pub use error::{Error, Result};
pub use linalg::min_eigenvalue;
pub use scalar::Real;

pub use covariance::{CovarianceKind, CovarianceSpec};
pub use inference::VcovFlavor;
pub use reml::FitOptions;
pub use trial_data::{Arm, ColumnMap, ModelSpec, VisitSchedule};

pub type TrialDataset = trial_data::TrialDataset<f64>;
pub type ParticipantRecord = trial_data::ParticipantRecord<f64>;
pub type DesignMatrices = trial_data::DesignMatrices<f64>;
pub type ParamVector = covariance::ParamVector<f64>;
pub type CovarianceMatrix = covariance::CovarianceMatrix<f64>;
pub type FitResult = reml::FitResult<f64>;
pub type EffectEstimate = inference::EffectEstimate<f64>;
pub type PowerInputs = power::PowerInputs<f64>;
pub type PlanningAssumptions = power::PlanningAssumptions<f64>;

/// Crate version embedded in every emitted artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
