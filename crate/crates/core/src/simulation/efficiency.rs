//! Effective sample size, the first-order control-arm size approximation,
//! and the precision ordering between full data and complete cases.

use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceMatrix;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, min_eigenvalue};
use crate::reml::{fit_mmrm, precision_matrix};
use crate::scalar::Real;
use crate::trial_data::{build_design, ModelSpec, TrialDataset};

/// N · V_benchmark / V_new.
pub fn ess(v_benchmark: f64, v_new: f64, n: f64) -> Result<f64> {
    for (name, v) in [("v_benchmark", v_benchmark), ("v_new", v_new), ("n", n)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Range { name, message: format!("{v} must be positive and finite") });
        }
    }
    Ok(n * v_benchmark / v_new)
}

/// First-order solution of f(N₀) = 1/V_benchmark around n₀, where f is the
/// treatment-effect precision as a function of control-arm size (the
/// treated-arm size is held fixed inside `f`):
/// N₀ ≈ n₀ − (V_benchmark·f(n₀) − 1) / (V_benchmark·f'(n₀)).
pub fn taylor_n0(n0: f64, v_benchmark: f64, f: impl Fn(f64) -> f64, f_prime: impl Fn(f64) -> f64) -> Result<f64> {
    let slope = f_prime(n0);
    check_slope(slope)?;
    if !(v_benchmark > 0.0) {
        return Err(Error::Range { name: "v_benchmark", message: format!("{v_benchmark} must be positive") });
    }
    let precision = f(n0);
    if !(precision > 0.0) {
        return Err(Error::Range { name: "f", message: format!("precision {precision} at n0 must be positive") });
    }
    let v_new = 1.0 / precision;
    Ok(n0 - (v_benchmark / v_new - 1.0) / (v_benchmark * slope))
}

/// The same approximation written through the effective sample size of the
/// design (n₀ controls, `n_total` participants overall):
/// N₀ ≈ n₀ − (ESS − N) / (N·V_benchmark·f'(n₀)).
pub fn taylor_n0_from_ess(n0: f64, n_total: f64, ess: f64, v_benchmark: f64, f_prime_n0: f64) -> Result<f64> {
    check_slope(f_prime_n0)?;
    if !(n_total > 0.0 && v_benchmark > 0.0 && ess > 0.0) {
        return Err(Error::Range { name: "ess", message: "N, ESS and V_benchmark must be positive".into() });
    }
    Ok(n0 - (ess - n_total) / (n_total * v_benchmark * f_prime_n0))
}

fn check_slope(slope: f64) -> Result<()> {
    if slope > 0.0 && slope.is_finite() {
        Ok(())
    } else {
        Err(Error::Assumption(format!("precision must increase with control-arm size; f'(n0) = {slope}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdOrderingReport<T> {
    /// Smallest eigenvalue of (full-data precision − complete-case precision).
    pub min_eigenvalue: T,
    pub full_variance: T,
    /// Infinite when the complete cases alone do not identify the model.
    pub complete_case_variance: T,
    pub participants: usize,
    pub complete_cases: usize,
}

impl<T: Real> PsdOrderingReport<T> {
    pub fn holds(&self, tol: T) -> bool {
        self.min_eigenvalue >= -tol && self.full_variance <= self.complete_case_variance
    }
}

/// Compares Σᵢ XᵢᵀRᵢ⁻¹Xᵢ over all participants with the same sum over
/// complete cases, at a common Ψ (fitted on the full data when not given).
pub fn psd_ordering_check<T: Real>(
    data: &TrialDataset<T>,
    spec: &ModelSpec,
    psi: Option<&CovarianceMatrix<T>>,
) -> Result<PsdOrderingReport<T>> {
    let full = build_design(data, spec)?;
    let visits = data.visit_count();
    let complete = full.filter(|d| d.observed.len() == visits);
    if complete.participants().is_empty() {
        return Err(Error::InsufficientData("no participant observed at every visit".into()));
    }
    let fitted;
    let psi = match psi {
        Some(p) => p,
        None => {
            fitted = fit_mmrm(data, spec)?.psi;
            &fitted
        }
    };
    let a_full = precision_matrix(&full, psi)?;
    let a_cc = precision_matrix(&complete, psi)?;
    let j = full.layout().expect("built from a dataset").final_treatment_column();
    let variance = |a| -> Result<T> { Ok(cholesky(a, "precision")?.inverse()[(j, j)]) };
    let full_variance = variance(&a_full)?;
    let complete_case_variance = variance(&a_cc).unwrap_or(T::lit(f64::INFINITY));
    Ok(PsdOrderingReport {
        min_eigenvalue: min_eigenvalue(&(a_full - a_cc)),
        full_variance,
        complete_case_variance,
        participants: full.participants().len(),
        complete_cases: complete.participants().len(),
    })
}
