//! Simulated trials for operating-characteristic studies, the repeated
//! subsampling procedure, and numerical checks of the efficiency results
//! (effective sample size, control-arm size approximation, precision
//! ordering under dropout).

mod efficiency;
mod scenario;
mod study;
mod subsample;

pub use efficiency::{ess, psd_ordering_check, taylor_n0, taylor_n0_from_ess, PsdOrderingReport};
pub use scenario::{
    build_joint_covariance, calibrate_dropout, cumulative_dropout, generate_trial, true_effect, Generator,
    JointCovariance, ScenarioConfig, ScenarioKind, BASELINE_COVARIATES, SHIFT_MEAN, SHIFT_SD,
};
pub use study::{
    replicate_seed, run_study, write_replicates_csv, write_report_csv, Method, MethodOutcome, MethodSummary,
    ReplicateResult, SimulationReport, MAX_FAILURE_RATE,
};
pub use subsample::{subsample_variance_study, SubsampleOptions, SubsampleStudy};
