use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::objective::RemlObjective;
use super::optimize::{bfgs, max_abs, nelder_mead, newton_polish, Outcome, Tolerances};
use crate::covariance::{
    extract_params, materialize, residual_covariance, CovarianceKind, CovarianceMatrix, CovarianceSpec, ParamVector,
};
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::scalar::Real;
use crate::trial_data::{build_design, DesignMatrices, ModelSpec, TrialDataset};

/// Operational definition of convergence for one covariance structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Max-norm of the gradient of −2ℓ_R.
    pub gradient_tolerance: f64,
    pub relative_objective_tolerance: f64,
    /// Try a Nelder-Mead restart before declaring a structure failed.
    pub simplex_rescue: bool,
    /// Smallest admissible eigenvalue ratio of the fitted Ψ.
    pub min_condition: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            relative_objective_tolerance: 1e-10,
            simplex_rescue: true,
            min_condition: 1e-10,
        }
    }
}

impl FitOptions {
    fn tolerances(&self) -> Tolerances {
        Tolerances {
            max_iterations: self.max_iterations,
            gradient: self.gradient_tolerance,
            relative_objective: self.relative_objective_tolerance,
        }
    }
}

/// Diagnostics of one rung of the covariance ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureAttempt {
    pub structure: CovarianceKind,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub objective: f64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub beta: DVector<T>,
    pub phi: ParamVector<T>,
    pub psi: CovarianceMatrix<T>,
    /// (XᵀΩ̂⁻¹X)⁻¹
    pub model_vcov: DMatrix<T>,
    pub structure: CovarianceKind,
    pub converged: bool,
    pub trace: OptimizerTrace,
    /// Every ladder rung tried, in order, including the successful one.
    pub attempts: Vec<StructureAttempt>,
    pub n_participants: usize,
    pub n_observations: usize,
    objective: Arc<RemlObjective<T>>,
}

impl<T: Real> FitResult<T> {
    pub fn spec(&self) -> CovarianceSpec {
        CovarianceSpec::new(self.structure, self.psi.dim())
    }

    pub fn design(&self) -> &DesignMatrices<T> {
        self.objective.design()
    }

    pub fn objective(&self) -> &RemlObjective<T> {
        &self.objective
    }

    pub fn column_labels(&self) -> &[String] {
        self.design().column_labels()
    }

    /// Rank of the fixed-effects design (always full at a successful fit).
    pub fn rank(&self) -> usize {
        self.beta.len()
    }
}

pub fn fit_mmrm<T: Real>(data: &TrialDataset<T>, spec: &ModelSpec) -> Result<FitResult<T>> {
    fit_mmrm_with(data, spec, &FitOptions::default())
}

pub fn fit_mmrm_with<T: Real>(data: &TrialDataset<T>, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult<T>> {
    let design = build_design(data, spec)?;
    fit_design(design, &spec.covariance_ladder, options)
}

/// Fits an arbitrary design, walking the covariance ladder until one
/// structure converges.
pub fn fit_design<T: Real>(
    design: DesignMatrices<T>,
    ladder: &[CovarianceKind],
    options: &FitOptions,
) -> Result<FitResult<T>> {
    if ladder.is_empty() {
        return Err(Error::Config("covariance ladder is empty".into()));
    }
    let p = design.column_count();
    let n_obs = design.observation_count();
    if n_obs < p + 1 {
        return Err(Error::InsufficientData(format!("{n_obs} observations for {p} mean parameters")));
    }
    // rank problems are reported here, not as structure failures
    let start_cov = residual_covariance(&design)?;
    let objective = Arc::new(RemlObjective::new(design)?);
    let dim = objective.design().visit_count();

    let mut attempts = Vec::with_capacity(ladder.len());
    for &kind in ladder {
        let spec = CovarianceSpec::new(kind, dim);
        let start = extract_params(&spec, &start_cov)?;
        match fit_structure(&objective, &spec, start, options) {
            Ok((outcome, evaluation_psi)) => {
                let attempt = StructureAttempt {
                    structure: kind,
                    converged: true,
                    iterations: outcome.iterations,
                    evaluations: outcome.evaluations,
                    gradient_norm: outcome.gradient_norm(),
                    objective: outcome.value.as_f64(),
                    message: "converged".into(),
                };
                attempts.push(attempt);
                let phi = ParamVector(outcome.x.clone());
                let eval = objective.evaluate(&spec, &phi, false)?;
                debug_assert_eq!(eval.psi, evaluation_psi);
                return Ok(FitResult {
                    beta: eval.beta,
                    phi,
                    psi: eval.psi,
                    model_vcov: eval.model_vcov,
                    structure: kind,
                    converged: true,
                    trace: OptimizerTrace {
                        iterations: outcome.iterations,
                        evaluations: outcome.evaluations,
                        gradient_norm: outcome.gradient_norm(),
                        objective: outcome.value.as_f64(),
                    },
                    attempts,
                    n_participants: objective.design().participants().len(),
                    n_observations: n_obs,
                    objective,
                });
            }
            Err(Failure::Rank(e)) => return Err(e),
            Err(Failure::Structure(attempt)) => {
                log::info!("{} covariance failed: {}", kind.name(), attempt.message);
                attempts.push(attempt);
            }
        }
    }
    Err(Error::Convergence {
        attempts: attempts
            .iter()
            .map(|a| {
                format!(
                    "{}: {} after {} iterations (gradient {:.3e}, objective {:.6})",
                    a.structure.name(),
                    a.message,
                    a.iterations,
                    a.gradient_norm,
                    a.objective
                )
            })
            .collect(),
    })
}

enum Failure {
    Rank(Error),
    Structure(StructureAttempt),
}

fn fit_structure<T: Real>(
    objective: &RemlObjective<T>,
    spec: &CovarianceSpec,
    start: ParamVector<T>,
    options: &FitOptions,
) -> std::result::Result<(Outcome<T>, CovarianceMatrix<T>), Failure> {
    let tol = options.tolerances();
    let mut rank_error = None;
    let mut f = |x: &DVector<T>| -> Option<(T, DVector<T>)> {
        match objective.value_and_gradient(spec, &ParamVector(x.clone())) {
            Ok(v) => Some(v),
            Err(e @ Error::Rank { .. }) => {
                rank_error.get_or_insert(e);
                None
            }
            Err(_) => None,
        }
    };
    let fail = |message: String, out: Option<&Outcome<T>>| StructureAttempt {
        structure: spec.kind,
        converged: false,
        iterations: out.map_or(0, |o| o.iterations),
        evaluations: out.map_or(0, |o| o.evaluations),
        gradient_norm: out.map_or(f64::NAN, |o| o.gradient_norm()),
        objective: out.map_or(f64::NAN, |o| o.value.as_f64()),
        message,
    };

    let mut best = bfgs(&mut f, start.0.clone(), &tol);
    if let Some(out) = best.take() {
        best = Some(if out.converged { out } else { newton_polish(&mut f, out, &tol, 20) });
    }
    let needs_rescue = best.as_ref().is_none_or(|o| !o.converged);
    if needs_rescue && options.simplex_rescue {
        let origin = best.as_ref().map_or(start.0.clone(), |o| o.x.clone());
        let budget = 400 * (origin.len() + 1);
        if let Some((x, _, evals)) = nelder_mead(&mut f, &origin, T::lit(0.5), budget) {
            let tol_rescue = Tolerances { max_iterations: tol.max_iterations, ..tol };
            if let Some(mut out) = bfgs(&mut f, x, &tol_rescue) {
                out.evaluations += evals + best.as_ref().map_or(0, |b| b.evaluations);
                out.iterations += best.as_ref().map_or(0, |b| b.iterations);
                if !out.converged {
                    out = newton_polish(&mut f, out, &tol, 20);
                }
                let better = best.as_ref().is_none_or(|b| out.converged || out.value < b.value);
                if better {
                    best = Some(out);
                }
            }
        }
    }
    if let Some(e) = rank_error {
        if best.is_none() {
            return Err(Failure::Rank(e));
        }
    }
    let Some(out) = best else {
        return Err(Failure::Structure(fail("objective not finite at starting values".into(), None)));
    };
    if !out.converged {
        let msg = format!(
            "did not converge (gradient max-norm {:.3e}, last relative change {:.3e})",
            max_abs(&out.gradient),
            out.last_relative_change
        );
        return Err(Failure::Structure(fail(msg, Some(&out))));
    }
    let psi = materialize(spec, &ParamVector(out.x.clone()))
        .map_err(|e| Failure::Structure(fail(e.to_string(), Some(&out))))?;
    let eig_min = min_eigenvalue(psi.as_matrix()).as_f64();
    let eig_max = psi.as_matrix().diagonal().iter().fold(0.0_f64, |a, v| a.max(v.as_f64()));
    if !(eig_min > options.min_condition * eig_max) {
        return Err(Failure::Structure(fail(
            format!("fitted covariance is numerically singular (min eigenvalue {eig_min:.3e})"),
            Some(&out),
        )));
    }
    Ok((out, psi))
}
