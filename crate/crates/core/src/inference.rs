//! Treatment-effect inference: Huber-White sandwich covariance,
//! Satterthwaite degrees of freedom and t-based tests and intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::ParamVector;
use crate::distributions::{t_quantile, t_sf};
use crate::error::{Error, Result};
use crate::linalg::{pinv_symmetric, symmetrize};
use crate::reml::FitResult;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VcovFlavor {
    /// (XᵀΩ̂⁻¹X)⁻¹
    Model,
    /// HC0 Huber-White sandwich.
    Sandwich,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DfMethod {
    Satterthwaite,
    /// Participants minus fixed-effect rank.
    Containment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate<T> {
    pub estimate: T,
    pub se: T,
    pub variance: T,
    pub df: T,
    pub df_method: DfMethod,
    pub t_stat: T,
    pub p_value: T,
    pub ci_low: T,
    pub ci_high: T,
    pub alpha: T,
    pub vcov_flavor: VcovFlavor,
}

fn require_converged<T: Real>(fit: &FitResult<T>) -> Result<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(Error::State("fit did not converge".into()))
    }
}

/// A⁻¹ B A⁻¹ with A = Σ XᵢᵀR̂ᵢ⁻¹Xᵢ and B = Σ XᵢᵀR̂ᵢ⁻¹r̂ᵢr̂ᵢᵀR̂ᵢ⁻¹Xᵢ.
pub fn sandwich_vcov<T: Real>(fit: &FitResult<T>) -> Result<DMatrix<T>> {
    require_converged(fit)?;
    let objective = fit.objective();
    let weights = objective.pattern_weights(&fit.psi)?;
    let p = fit.beta.len();
    let mut meat = DMatrix::<T>::zeros(p, p);
    for (i, d) in objective.design().participants().iter().enumerate() {
        let w = &weights[objective.pattern_of(i)];
        let r = &d.y - &d.x * &fit.beta;
        let score = d.x.transpose() * (w * r);
        meat += &score * score.transpose();
    }
    let bread = &fit.model_vcov;
    let mut out = bread * meat * bread;
    symmetrize(&mut out);
    Ok(out)
}

pub fn vcov<T: Real>(fit: &FitResult<T>, flavor: VcovFlavor) -> Result<DMatrix<T>> {
    match flavor {
        VcovFlavor::Model => {
            require_converged(fit)?;
            Ok(fit.model_vcov.clone())
        }
        VcovFlavor::Sandwich => sandwich_vcov(fit),
    }
}

/// Satterthwaite degrees of freedom for the contrast cᵀβ:
/// 2(cᵀV̂c)² / gᵀÂg, where g is the finite-difference gradient of
/// φ ↦ cᵀV(φ)c and Â the inverse REML information at φ̂. Clamped to
/// [1, n_obs − p].
pub fn satterthwaite_df<T: Real>(fit: &FitResult<T>, contrast: &DVector<T>) -> Result<T> {
    require_converged(fit)?;
    if contrast.len() != fit.beta.len() {
        return Err(Error::Shape(format!("contrast has {} entries for {} coefficients", contrast.len(), fit.beta.len())));
    }
    if contrast.iter().all(|v| *v == T::zero()) {
        return Err(Error::Argument("contrast is zero".into()));
    }
    let spec = fit.spec();
    let objective = fit.objective();
    let upper = T::from_count(fit.n_observations.saturating_sub(fit.beta.len()).max(1));
    let quad = |m: &DMatrix<T>| contrast.dot(&(m * contrast));
    let v = quad(&fit.model_vcov);

    let k = fit.phi.len();
    let mut g = DVector::<T>::zeros(k);
    for j in 0..k {
        let h = T::lit(1e-5) * fit.phi.0[j].abs().max(T::one());
        let mut up = fit.phi.clone();
        up.0[j] += h;
        let mut dn = fit.phi.clone();
        dn.0[j] -= h;
        let vu = quad(&objective.evaluate(&spec, &up, false)?.model_vcov);
        let vd = quad(&objective.evaluate(&spec, &dn, false)?.model_vcov);
        g[j] = (vu - vd) / (T::lit(2.0) * h);
    }
    let hessian = objective.hessian(&spec, &ParamVector(fit.phi.0.clone()))?;
    // Var(φ̂) ≈ inverse of the information ½H, so gᵀÂg = 2 gᵀH⁻¹g
    let h_inv = pinv_symmetric(&hessian, T::lit(1e-12));
    let denom = T::lit(2.0) * g.dot(&(h_inv * &g));
    let df = if denom > T::zero() { T::lit(2.0) * v * v / denom } else { upper };
    let df = if df.is_finite() { df } else { upper };
    Ok(df.max(T::one()).min(upper))
}

pub fn containment_df<T: Real>(fit: &FitResult<T>) -> T {
    T::from_count(fit.n_participants.saturating_sub(fit.rank()).max(1))
}

/// Builds test statistic, two-sided p-value and (1 − alpha) interval from
/// an estimate, its variance and reference degrees of freedom.
pub fn effect_from_parts<T: Real>(
    estimate: T,
    variance: T,
    df: T,
    df_method: DfMethod,
    alpha: T,
    vcov_flavor: VcovFlavor,
) -> Result<EffectEstimate<T>> {
    let a = alpha.as_f64();
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Range { name: "alpha", message: format!("{a} not in (0, 1)") });
    }
    if !(variance >= T::zero()) || !(df > T::zero()) {
        return Err(Error::Numerical(format!("variance {variance} / df {df} not admissible")));
    }
    let se = variance.sqrt();
    let dff = df.as_f64();
    let t_stat = if se > T::zero() { estimate / se } else { T::zero() };
    let p = (2.0 * t_sf(t_stat.as_f64().abs(), dff)).min(1.0);
    let half_width = T::lit(t_quantile(1.0 - a / 2.0, dff)) * se;
    Ok(EffectEstimate {
        estimate,
        se,
        variance,
        df,
        df_method,
        t_stat,
        p_value: T::lit(p),
        ci_low: estimate - half_width,
        ci_high: estimate + half_width,
        alpha,
        vcov_flavor,
    })
}

/// Inference for an arbitrary linear contrast of the coefficients.
pub fn contrast_effect<T: Real>(
    fit: &FitResult<T>,
    contrast: &DVector<T>,
    flavor: VcovFlavor,
    alpha: T,
) -> Result<EffectEstimate<T>> {
    let cov = vcov(fit, flavor)?;
    let estimate = contrast.dot(&fit.beta);
    let variance = contrast.dot(&(&cov * contrast));
    let (df, method) = match satterthwaite_df(fit, contrast) {
        Ok(df) => (df, DfMethod::Satterthwaite),
        Err(e @ (Error::Argument(_) | Error::Shape(_) | Error::State(_))) => return Err(e),
        Err(e) => {
            log::warn!("Satterthwaite df unavailable ({e}); using containment df");
            (containment_df(fit), DfMethod::Containment)
        }
    };
    effect_from_parts(estimate, variance, df, method, alpha, flavor)
}

/// Treatment effect at the final scheduled visit.
pub fn treatment_effect<T: Real>(fit: &FitResult<T>, flavor: VcovFlavor, alpha: T) -> Result<EffectEstimate<T>> {
    let layout = fit
        .design()
        .layout()
        .ok_or_else(|| Error::State("fit was not built from a trial dataset; no treatment column".into()))?;
    let mut c = DVector::<T>::zeros(fit.beta.len());
    c[layout.final_treatment_column()] = T::one();
    contrast_effect(fit, &c, flavor, alpha)
}
