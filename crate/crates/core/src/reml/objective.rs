//! Restricted log-likelihood of the repeated-measures model and its
//! analytic gradient in the covariance parameters.
//!
//! Participants sharing the same set of observed visits share the same
//! residual covariance block R = Ψ[obs, obs], so every quantity in the
//! objective can be written with per-pattern sums over visit pairs:
//!
//! ```text
//! F_ab = Σ_i (x_ia x_ibᵀ + x_ib x_iaᵀ)    e_ab = Σ_i (x_ia y_ib + x_ib y_ia)    Y_ab = Σ_i y_ia y_ib
//! ```
//!
//! where `x_ia` is participant i's design row at its a-th observed visit.
//! These are accumulated once per design and reused at every evaluation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::covariance::{materialize_with_jacobian, principal_submatrix, CovarianceMatrix, CovarianceSpec, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::{aliased_columns, cholesky, chol_logdet, symmetrize};
use crate::scalar::Real;
use crate::trial_data::DesignMatrices;

#[derive(Debug)]
struct PairStats<T: Real> {
    a: usize,
    b: usize,
    f: DMatrix<T>,
    e: DVector<T>,
    y: T,
}

#[derive(Debug)]
struct PatternStats<T: Real> {
    observed: Vec<usize>,
    count: usize,
    pairs: Vec<PairStats<T>>,
}

/// Output of one objective evaluation.
#[derive(Debug, Clone)]
pub struct RemlEvaluation<T: Real> {
    /// −2 × restricted log-likelihood, including the (n − p)·log 2π constant.
    pub value: T,
    pub gradient: Option<DVector<T>>,
    /// GLS coefficients at the evaluated covariance.
    pub beta: DVector<T>,
    /// (Σ XᵢᵀRᵢ⁻¹Xᵢ)⁻¹
    pub model_vcov: DMatrix<T>,
    pub psi: CovarianceMatrix<T>,
}

/// Precomputed REML objective for one design.
#[derive(Debug)]
pub struct RemlObjective<T: Real> {
    design: DesignMatrices<T>,
    patterns: Vec<PatternStats<T>>,
    pattern_of: Vec<usize>,
    n_obs: usize,
}

impl<T: Real> RemlObjective<T> {
    pub fn new(design: DesignMatrices<T>) -> Result<Self> {
        let p = design.column_count();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut patterns: Vec<PatternStats<T>> = Vec::new();
        let mut pattern_of = Vec::with_capacity(design.participants().len());
        for d in design.participants() {
            let k = *index.entry(d.observed.clone()).or_insert_with(|| {
                let m = d.observed.len();
                let mut pairs = Vec::with_capacity(m * (m + 1) / 2);
                for a in 0..m {
                    for b in a..m {
                        pairs.push(PairStats { a, b, f: DMatrix::zeros(p, p), e: DVector::zeros(p), y: T::zero() });
                    }
                }
                patterns.push(PatternStats { observed: d.observed.clone(), count: 0, pairs });
                patterns.len() - 1
            });
            pattern_of.push(k);
            let pat = &mut patterns[k];
            pat.count += 1;
            for pair in &mut pat.pairs {
                let xa = d.x.row(pair.a);
                let xb = d.x.row(pair.b);
                let (ya, yb) = (d.y[pair.a], d.y[pair.b]);
                // rank-2 symmetric update: x_a x_bᵀ + x_b x_aᵀ
                for r in 0..p {
                    let (ar, br) = (xa[r], xb[r]);
                    if ar == T::zero() && br == T::zero() {
                        continue;
                    }
                    for c in 0..p {
                        pair.f[(r, c)] += ar * xb[c] + br * xa[c];
                    }
                    pair.e[r] += ar * yb + br * ya;
                }
                pair.y += ya * yb;
            }
        }
        let n_obs = design.observation_count();
        Ok(Self { design, patterns, pattern_of, n_obs })
    }

    pub fn design(&self) -> &DesignMatrices<T> {
        &self.design
    }

    pub fn observation_count(&self) -> usize {
        self.n_obs
    }

    pub fn column_count(&self) -> usize {
        self.design.column_count()
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns.len()
    }

    pub(crate) fn pattern_of(&self, participant: usize) -> usize {
        self.pattern_of[participant]
    }

    pub fn value(&self, spec: &CovarianceSpec, phi: &ParamVector<T>) -> Result<T> {
        self.evaluate(spec, phi, false).map(|e| e.value)
    }

    pub fn value_and_gradient(&self, spec: &CovarianceSpec, phi: &ParamVector<T>) -> Result<(T, DVector<T>)> {
        let e = self.evaluate(spec, phi, true)?;
        Ok((e.value, e.gradient.expect("gradient requested")))
    }

    pub fn evaluate(&self, spec: &CovarianceSpec, phi: &ParamVector<T>, gradient: bool) -> Result<RemlEvaluation<T>> {
        if spec.dim != self.design.visit_count() {
            return Err(Error::Shape(format!(
                "covariance dimension {} does not match {} visits",
                spec.dim,
                self.design.visit_count()
            )));
        }
        let (psi, derivs) = materialize_with_jacobian(spec, phi)?;
        let p = self.column_count();
        let half = T::lit(0.5);
        let two = T::lit(2.0);

        let mut weights = Vec::with_capacity(self.patterns.len());
        let mut logdet_sum = T::zero();
        let mut a = DMatrix::<T>::zeros(p, p);
        let mut xwy = DVector::<T>::zeros(p);
        for pat in &self.patterns {
            let r = principal_submatrix(psi.as_matrix(), &pat.observed);
            let chol = cholesky(&r, "residual covariance block")?;
            logdet_sum += chol_logdet(&chol) * T::from_count(pat.count);
            let w = chol.inverse();
            for pair in &pat.pairs {
                let scale = if pair.a == pair.b { half } else { T::one() };
                let wab = w[(pair.a, pair.b)] * scale;
                a += &pair.f * wab;
                xwy.axpy(wab, &pair.e, T::one());
            }
            weights.push(w);
        }
        symmetrize(&mut a);
        let a_chol = match cholesky(&a, "information matrix") {
            Ok(c) => c,
            Err(_) => return Err(self.rank_error(&a)),
        };
        let logdet_a = chol_logdet(&a_chol);
        if !logdet_a.is_finite() {
            return Err(self.rank_error(&a));
        }
        let beta = a_chol.solve(&xwy);
        let mut a_inv = a_chol.inverse();
        symmetrize(&mut a_inv);

        let mut quad = T::zero();
        let n = spec.dim;
        let mut g_mat = DMatrix::<T>::zeros(n, n);
        for (pat, w) in self.patterns.iter().zip(&weights) {
            let m = pat.observed.len();
            let mut q = DMatrix::<T>::zeros(m, m);
            let mut lev = DMatrix::<T>::zeros(m, m);
            for pair in &pat.pairs {
                let fb = &pair.f * &beta;
                let qab = pair.y - beta.dot(&pair.e) + half * beta.dot(&fb);
                q[(pair.a, pair.b)] = qab;
                q[(pair.b, pair.a)] = qab;
                let mult = if pair.a == pair.b { T::one() } else { two };
                quad += mult * w[(pair.a, pair.b)] * qab;
                if gradient {
                    let lab = half * pair.f.dot(&a_inv);
                    lev[(pair.a, pair.b)] = lab;
                    lev[(pair.b, pair.a)] = lab;
                }
            }
            if gradient {
                // count·W − W (M + Q) W
                let inner = lev + q;
                let local = w * T::from_count(pat.count) - w * inner * w;
                for (la, &ga) in pat.observed.iter().enumerate() {
                    for (lb, &gb) in pat.observed.iter().enumerate() {
                        g_mat[(ga, gb)] += local[(la, lb)];
                    }
                }
            }
        }

        let dof = T::from_count(self.n_obs) - T::from_count(p);
        let value = logdet_sum + logdet_a + quad + dof * T::two_pi().ln();
        if !value.is_finite() {
            return Err(Error::Numerical("restricted likelihood is not finite".into()));
        }
        let gradient = gradient.then(|| DVector::from_iterator(derivs.len(), derivs.iter().map(|d| g_mat.dot(d))));
        Ok(RemlEvaluation { value, gradient, beta, model_vcov: a_inv, psi })
    }

    /// Central-difference Hessian of the analytic gradient.
    pub fn hessian(&self, spec: &CovarianceSpec, phi: &ParamVector<T>) -> Result<DMatrix<T>> {
        let k = phi.len();
        let mut h = DMatrix::<T>::zeros(k, k);
        for j in 0..k {
            let step = T::lit(1e-4) * phi.0[j].abs().max(T::one());
            let mut up = phi.clone();
            up.0[j] += step;
            let mut dn = phi.clone();
            dn.0[j] -= step;
            let (_, gu) = self.value_and_gradient(spec, &up)?;
            let (_, gd) = self.value_and_gradient(spec, &dn)?;
            h.set_column(j, &((gu - gd) / (T::lit(2.0) * step)));
        }
        symmetrize(&mut h);
        Ok(h)
    }

    fn rank_error(&self, info: &DMatrix<T>) -> Error {
        let aliased = aliased_columns(info);
        if aliased.is_empty() {
            Error::Numerical("information matrix is not positive definite".into())
        } else {
            Error::Rank { columns: aliased.iter().map(|&j| self.design.column_labels()[j].clone()).collect() }
        }
    }

    /// Per-participant inverse residual covariance blocks Rᵢ⁻¹ at `psi`, indexed by pattern.
    pub(crate) fn pattern_weights(&self, psi: &CovarianceMatrix<T>) -> Result<Vec<DMatrix<T>>> {
        self.patterns
            .iter()
            .map(|pat| {
                let r = principal_submatrix(psi.as_matrix(), &pat.observed);
                Ok(cholesky(&r, "residual covariance block")?.inverse())
            })
            .collect()
    }
}

/// −2 × restricted log-likelihood at `phi` (builds the sufficient statistics on each call).
pub fn reml_neg2loglik<T: Real>(design: &DesignMatrices<T>, spec: &CovarianceSpec, phi: &ParamVector<T>) -> Result<T> {
    RemlObjective::new(design.clone())?.value(spec, phi)
}

/// GLS estimate and its model-based covariance for a fixed Ψ, accumulated
/// participant by participant.
pub fn gls_solve<T: Real>(design: &DesignMatrices<T>, psi: &CovarianceMatrix<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    if psi.dim() != design.visit_count() {
        return Err(Error::Shape(format!("Ψ is {0}x{0} for {1} visits", psi.dim(), design.visit_count())));
    }
    let info = precision_matrix(design, psi)?;
    let p = design.column_count();
    let mut rhs = DVector::<T>::zeros(p);
    let mut cache: HashMap<&[usize], DMatrix<T>> = HashMap::new();
    for d in design.participants() {
        let w = cache.entry(d.observed.as_slice()).or_insert_with(|| {
            let r = principal_submatrix(psi.as_matrix(), &d.observed);
            cholesky(&r, "residual block").expect("principal submatrix of PD Ψ").inverse()
        });
        rhs += d.x.transpose() * (&*w * &d.y);
    }
    let chol = cholesky(&info, "information matrix").map_err(|_| rank_error_for(design, &info))?;
    let beta = chol.solve(&rhs);
    let mut vcov = chol.inverse();
    symmetrize(&mut vcov);
    Ok((beta, vcov))
}

/// Σᵢ XᵢᵀRᵢ⁻¹Xᵢ at a fixed Ψ.
pub fn precision_matrix<T: Real>(design: &DesignMatrices<T>, psi: &CovarianceMatrix<T>) -> Result<DMatrix<T>> {
    cholesky(psi.as_matrix(), "Ψ")?;
    let p = design.column_count();
    let mut info = DMatrix::<T>::zeros(p, p);
    let mut cache: HashMap<&[usize], DMatrix<T>> = HashMap::new();
    for d in design.participants() {
        let w = cache.entry(d.observed.as_slice()).or_insert_with(|| {
            let r = principal_submatrix(psi.as_matrix(), &d.observed);
            cholesky(&r, "residual block").expect("principal submatrix of PD Ψ").inverse()
        });
        info += d.x.transpose() * (&*w * &d.x);
    }
    symmetrize(&mut info);
    Ok(info)
}

fn rank_error_for<T: Real>(design: &DesignMatrices<T>, info: &DMatrix<T>) -> Error {
    let aliased = aliased_columns(info);
    if aliased.is_empty() {
        Error::Numerical("information matrix is not positive definite".into())
    } else {
        Error::Rank { columns: aliased.iter().map(|&j| design.column_labels()[j].clone()).collect() }
    }
}
