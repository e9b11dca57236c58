//! Within-participant residual covariance structures.
//!
//! Every structure is mapped from an unconstrained real vector so the
//! optimizer never has to handle constraints:
//!
//! * unstructured: log-Cholesky, lower triangle stored row by row with
//!   diagonal entries on the log scale;
//! * Toeplitz (homogeneous): log standard deviation followed by the
//!   `atanh` of the T−1 partial autocorrelations;
//! * compound symmetry: log standard deviation and a `tanh`-squashed
//!   correlation mapped onto the feasible interval (−1/(T−1), 1).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{aliased_columns, cholesky};
use crate::scalar::Real;
use crate::trial_data::DesignMatrices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Unstructured,
    Toeplitz,
    CompoundSymmetry,
}

impl CovarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceKind::Unstructured => "unstructured",
            CovarianceKind::Toeplitz => "toeplitz",
            CovarianceKind::CompoundSymmetry => "compound_symmetry",
        }
    }
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "unstructured" | "us" | "un" => Ok(CovarianceKind::Unstructured),
            "toeplitz" | "toep" => Ok(CovarianceKind::Toeplitz),
            "compound_symmetry" | "cs" => Ok(CovarianceKind::CompoundSymmetry),
            other => Err(Error::Config(format!("unknown covariance structure {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub kind: CovarianceKind,
    pub dim: usize,
}

impl CovarianceSpec {
    pub fn new(kind: CovarianceKind, dim: usize) -> Self {
        Self { kind, dim }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            CovarianceKind::Unstructured => self.dim * (self.dim + 1) / 2,
            CovarianceKind::Toeplitz => self.dim,
            CovarianceKind::CompoundSymmetry => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T: Real>(pub DVector<T>);

impl<T: Real> ParamVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(DVector::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.0
    }
}

/// Symmetric positive-definite T×T covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix<T: Real>(DMatrix<T>);

impl<T: Real> CovarianceMatrix<T> {
    /// Validates squareness, symmetry (relative 1e-12) and positive definiteness.
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!("covariance is {}x{}", m.nrows(), m.ncols())));
        }
        let scale = m.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        let tol = T::lit(1e-12).max(T::default_epsilon() * T::lit(8.0)) * scale.max(T::one());
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::Shape("covariance is not symmetric".into()));
                }
            }
        }
        cholesky(&m, "covariance matrix")?;
        Ok(Self(m))
    }

    #[cfg(test)]
    pub(crate) fn from_trusted(m: DMatrix<T>) -> Self {
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    /// Scales every entry by `c > 0`.
    pub fn scaled(&self, c: T) -> Self {
        Self(&self.0 * c)
    }
}

fn check_params<T: Real>(spec: &CovarianceSpec, phi: &ParamVector<T>) -> Result<()> {
    if spec.dim == 0 {
        return Err(Error::Shape("covariance dimension must be positive".into()));
    }
    if phi.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "{} covariance of dimension {} takes {} parameters, got {}",
            spec.kind.name(),
            spec.dim,
            spec.param_count(),
            phi.len()
        )));
    }
    if phi.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite covariance parameter".into()));
    }
    Ok(())
}

pub fn materialize<T: Real>(spec: &CovarianceSpec, phi: &ParamVector<T>) -> Result<CovarianceMatrix<T>> {
    materialize_impl(spec, phi, false).map(|(m, _)| m)
}

/// Covariance together with its partial derivatives, one T×T matrix per parameter.
pub fn materialize_with_jacobian<T: Real>(
    spec: &CovarianceSpec,
    phi: &ParamVector<T>,
) -> Result<(CovarianceMatrix<T>, Vec<DMatrix<T>>)> {
    materialize_impl(spec, phi, true)
}

fn materialize_impl<T: Real>(
    spec: &CovarianceSpec,
    phi: &ParamVector<T>,
    jacobian: bool,
) -> Result<(CovarianceMatrix<T>, Vec<DMatrix<T>>)> {
    check_params(spec, phi)?;
    let n = spec.dim;
    let two = T::lit(2.0);
    let (psi, derivs) = match spec.kind {
        CovarianceKind::Unstructured => {
            let l = unstructured_factor(n, &phi.0);
            let psi = &l * l.transpose();
            let mut derivs = Vec::new();
            if jacobian {
                let mut k = 0;
                for i in 0..n {
                    for j in 0..=i {
                        let s = if i == j { l[(i, i)] } else { T::one() };
                        let mut d = DMatrix::<T>::zeros(n, n);
                        for b in 0..n {
                            d[(i, b)] += s * l[(b, j)];
                            d[(b, i)] += s * l[(b, j)];
                        }
                        derivs.push(d);
                        k += 1;
                    }
                }
                debug_assert_eq!(k, phi.len());
            }
            (psi, derivs)
        }
        CovarianceKind::Toeplitz => {
            let var = (two * phi.0[0]).exp();
            let pacf: Vec<T> = phi.0.iter().skip(1).map(|v| v.tanh()).collect();
            let (rho, drho) = pacf_to_acf(&pacf);
            let psi = DMatrix::from_fn(n, n, |a, b| var * rho[a.abs_diff(b)]);
            let mut derivs = Vec::new();
            if jacobian {
                derivs.push(&psi * two);
                for (k, pk) in pacf.iter().enumerate() {
                    let chain = T::one() - *pk * *pk;
                    derivs.push(DMatrix::from_fn(n, n, |a, b| {
                        let lag = a.abs_diff(b);
                        if lag == 0 {
                            T::zero()
                        } else {
                            var * drho[lag][k] * chain
                        }
                    }));
                }
            }
            (psi, derivs)
        }
        CovarianceKind::CompoundSymmetry => {
            let var = (two * phi.0[0]).exp();
            let lo = cs_lower_bound::<T>(n);
            let th = phi.0[1].tanh();
            let half_span = (T::one() - lo) / two;
            let rho = lo + half_span * (th + T::one());
            let psi = DMatrix::from_fn(n, n, |a, b| if a == b { var } else { var * rho });
            let mut derivs = Vec::new();
            if jacobian {
                derivs.push(&psi * two);
                let drho = half_span * (T::one() - th * th);
                derivs.push(DMatrix::from_fn(n, n, |a, b| if a == b { T::zero() } else { var * drho }));
            }
            (psi, derivs)
        }
    };
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{} covariance overflowed", spec.kind.name())));
    }
    Ok((CovarianceMatrix(psi), derivs))
}

fn unstructured_factor<T: Real>(n: usize, phi: &DVector<T>) -> DMatrix<T> {
    let mut l = DMatrix::<T>::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { phi[k].exp() } else { phi[k] };
            k += 1;
        }
    }
    l
}

fn cs_lower_bound<T: Real>(n: usize) -> T {
    if n >= 2 {
        -T::one() / T::from_count(n - 1)
    } else {
        -T::one()
    }
}

/// Autocorrelations ρ_0..ρ_m from partial autocorrelations π_1..π_m via the
/// Durbin-Levinson recursion, with dρ_k/dπ_j.
fn pacf_to_acf<T: Real>(pacf: &[T]) -> (Vec<T>, Vec<Vec<T>>) {
    let m = pacf.len();
    let mut rho = vec![T::one()];
    let mut drho = vec![vec![T::zero(); m]];
    let mut a: Vec<T> = Vec::with_capacity(m);
    let mut da: Vec<Vec<T>> = Vec::with_capacity(m);
    for k in 1..=m {
        let p = pacf[k - 1];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        let mut ds1 = vec![T::zero(); m];
        let mut ds2 = vec![T::zero(); m];
        for j in 1..k {
            s1 += a[j - 1] * rho[k - j];
            s2 += a[j - 1] * rho[j];
            for q in 0..m {
                ds1[q] += da[j - 1][q] * rho[k - j] + a[j - 1] * drho[k - j][q];
                ds2[q] += da[j - 1][q] * rho[j] + a[j - 1] * drho[j][q];
            }
        }
        let rk = s1 + p * (T::one() - s2);
        let mut drk: Vec<T> = (0..m).map(|q| ds1[q] - p * ds2[q]).collect();
        drk[k - 1] += T::one() - s2;
        rho.push(rk);
        drho.push(drk);

        let mut next = Vec::with_capacity(k);
        let mut dnext = Vec::with_capacity(k);
        for j in 1..k {
            next.push(a[j - 1] - p * a[k - j - 1]);
            let mut d: Vec<T> = (0..m).map(|q| da[j - 1][q] - p * da[k - j - 1][q]).collect();
            d[k - 1] -= a[k - j - 1];
            dnext.push(d);
        }
        next.push(p);
        let mut e = vec![T::zero(); m];
        e[k - 1] = T::one();
        dnext.push(e);
        a = next;
        da = dnext;
    }
    (rho, drho)
}

/// Partial autocorrelations from autocorrelations ρ_1..ρ_m, each clamped
/// into [−bound, bound] so the implied Toeplitz matrix is positive definite.
fn acf_to_pacf<T: Real>(acf: &[T], bound: T) -> Vec<T> {
    let m = acf.len();
    let mut rho = vec![T::one()];
    let mut a: Vec<T> = Vec::new();
    let mut out = Vec::with_capacity(m);
    for k in 1..=m {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 1..k {
            s1 += a[j - 1] * rho[k - j];
            s2 += a[j - 1] * rho[j];
        }
        let denom = T::one() - s2;
        let raw = (acf[k - 1] - s1) / denom;
        let p = if raw.is_finite() { raw.max(-bound).min(bound) } else { T::zero() };
        out.push(p);
        // keep the recursion consistent with the clamped value
        rho.push(s1 + p * denom);
        let mut next = Vec::with_capacity(k);
        for j in 1..k {
            next.push(a[j - 1] - p * a[k - j - 1]);
        }
        next.push(p);
        a = next;
    }
    out
}

pub fn extract_params<T: Real>(spec: &CovarianceSpec, psi: &CovarianceMatrix<T>) -> Result<ParamVector<T>> {
    let m = psi.as_matrix();
    let n = spec.dim;
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Shape(format!("expected {n}x{n} covariance, got {}x{}", m.nrows(), m.ncols())));
    }
    let chol = cholesky(m, "covariance matrix passed to extract_params")?;
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let values = match spec.kind {
        CovarianceKind::Unstructured => {
            let l = chol.l();
            let mut v = Vec::with_capacity(spec.param_count());
            for i in 0..n {
                for j in 0..=i {
                    v.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                }
            }
            v
        }
        CovarianceKind::Toeplitz => {
            let var = m.diagonal().mean();
            let acf: Vec<T> = (1..n)
                .map(|lag| {
                    let band = (0..n - lag).fold(T::zero(), |acc, a| acc + m[(a, a + lag)]);
                    band / T::from_count(n - lag) / var
                })
                .collect();
            let pacf = acf_to_pacf(&acf, T::lit(0.999));
            let mut v = vec![half * var.ln()];
            v.extend(pacf.iter().map(|&p| atanh(p)));
            v
        }
        CovarianceKind::CompoundSymmetry => {
            let var = m.diagonal().mean();
            let lo = cs_lower_bound::<T>(n);
            let rho = if n >= 2 {
                let off = m.sum() - m.trace();
                off / T::from_count(n * (n - 1)) / var
            } else {
                T::zero()
            };
            let margin = T::lit(1e-6) * (T::one() - lo);
            let rho = rho.max(lo + margin).min(T::one() - margin);
            let u = two * (rho - lo) / (T::one() - lo) - T::one();
            vec![half * var.ln(), atanh(u)]
        }
    };
    Ok(ParamVector(DVector::from_vec(values)))
}

fn atanh<T: Real>(x: T) -> T {
    T::lit(0.5) * ((T::one() + x) / (T::one() - x)).ln()
}

/// Principal submatrix on the (zero-based, strictly increasing) observed visits.
pub fn subset<T: Real>(psi: &CovarianceMatrix<T>, observed: &[usize]) -> Result<CovarianceMatrix<T>> {
    if observed.is_empty() {
        return Err(Error::Index("empty visit subset".into()));
    }
    if observed.windows(2).any(|w| w[0] >= w[1]) || observed.iter().any(|&t| t >= psi.dim()) {
        return Err(Error::Index(format!("visit subset {observed:?} invalid for dimension {}", psi.dim())));
    }
    Ok(CovarianceMatrix(principal_submatrix(psi.as_matrix(), observed)))
}

pub(crate) fn principal_submatrix<T: Real>(m: &DMatrix<T>, idx: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// Starting values: pairwise-complete covariance of pooled OLS residuals,
/// eigenvalue-clipped when indefinite, then mapped to the requested structure.
pub fn initialize_params<T: Real>(design: &DesignMatrices<T>, spec: &CovarianceSpec) -> Result<ParamVector<T>> {
    let psi = residual_covariance(design)?;
    extract_params(spec, &psi)
}

pub(crate) fn residual_covariance<T: Real>(design: &DesignMatrices<T>) -> Result<CovarianceMatrix<T>> {
    let p = design.column_count();
    let n = design.visit_count();
    let mut gram = DMatrix::<T>::zeros(p, p);
    let mut xty = DVector::<T>::zeros(p);
    for d in design.participants() {
        gram += d.x.transpose() * &d.x;
        xty += d.x.transpose() * &d.y;
    }
    let aliased = aliased_columns(&gram);
    if !aliased.is_empty() {
        return Err(Error::Rank {
            columns: aliased.iter().map(|&j| design.column_labels()[j].clone()).collect(),
        });
    }
    let beta = cholesky(&gram, "pooled cross-product")?.solve(&xty);

    let mut sums = DMatrix::<T>::zeros(n, n);
    let mut counts = vec![0usize; n * n];
    for d in design.participants() {
        let r = &d.y - &d.x * &beta;
        for (a, &s) in d.observed.iter().enumerate() {
            for (b, &t) in d.observed.iter().enumerate() {
                sums[(s, t)] += r[a] * r[b];
                counts[s * n + t] += 1;
            }
        }
    }
    let mut cov = DMatrix::from_fn(n, n, |s, t| {
        let c = counts[s * n + t];
        if c == 0 {
            T::zero()
        } else {
            sums[(s, t)] / T::from_count(c)
        }
    });
    for t in 0..n {
        if counts[t * n + t] == 0 {
            return Err(Error::InsufficientData(format!("no observations at visit {}", t + 1)));
        }
    }
    crate::linalg::symmetrize(&mut cov);
    Ok(CovarianceMatrix(clip_to_pd(cov)))
}

/// Raises eigenvalues below 1e-4 · trace/T to that floor; PD inputs are returned untouched.
pub(crate) fn clip_to_pd<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    let n = m.nrows();
    let floor = T::lit(1e-4) * m.trace() / T::from_count(n);
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return m;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    crate::linalg::symmetrize(&mut out);
    out
}
