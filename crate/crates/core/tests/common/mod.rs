//! Independent dense REML oracle and small fixture generators shared by the
//! integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use procova_mmrm::trial_data::{DesignMatrices, ParticipantRecord, TrialDataset};
use procova_mmrm::{Arm, CovarianceKind, ModelSpec, VisitSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stacked X, y and block-diagonal Ω for a design at covariance `psi`.
pub fn stack(design: &DesignMatrices<f64>, psi: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n: usize = design.observation_count();
    let p = design.column_count();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut omega = DMatrix::zeros(n, n);
    let mut row = 0;
    for d in design.participants() {
        let m = d.observed.len();
        x.view_mut((row, 0), (m, p)).copy_from(&d.x);
        y.rows_mut(row, m).copy_from(&d.y);
        for (a, &s) in d.observed.iter().enumerate() {
            for (b, &t) in d.observed.iter().enumerate() {
                omega[(row + a, row + b)] = psi[(s, t)];
            }
        }
        row += m;
    }
    (x, y, omega)
}

/// −2 × REML log-likelihood from the stacked matrices, with its GLS β.
/// `None` when Ω or XᵀΩ⁻¹X is not positive definite.
pub fn dense_reml(design: &DesignMatrices<f64>, psi: &DMatrix<f64>) -> Option<(f64, DVector<f64>)> {
    let (x, y, omega) = stack(design, psi);
    let n = y.len() as f64;
    let p = x.ncols() as f64;
    let chol = omega.clone().cholesky()?;
    let logdet_omega = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let oi = chol.inverse();
    let a = x.transpose() * &oi * &x;
    let achol = a.clone().cholesky()?;
    let logdet_a = 2.0 * achol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let beta = achol.solve(&(x.transpose() * &oi * &y));
    let r = &y - &x * &beta;
    let quad = (r.transpose() * &oi * &r)[(0, 0)];
    Some((logdet_omega + logdet_a + quad + (n - p) * (2.0 * std::f64::consts::PI).ln(), beta))
}

/// Maps unconstrained oracle parameters to Ψ: plain Cholesky factor for
/// unstructured, (σ², ρ₁, …) for Toeplitz and (σ², ρ) for compound symmetry.
pub fn oracle_psi(kind: CovarianceKind, dim: usize, theta: &[f64]) -> Option<DMatrix<f64>> {
    let psi = match kind {
        CovarianceKind::Unstructured => {
            let mut l = DMatrix::zeros(dim, dim);
            let mut k = 0;
            for i in 0..dim {
                for j in 0..=i {
                    l[(i, j)] = theta[k];
                    k += 1;
                }
            }
            &l * l.transpose()
        }
        CovarianceKind::Toeplitz => {
            let s2 = theta[0];
            if s2 <= 0.0 {
                return None;
            }
            DMatrix::from_fn(dim, dim, |i, j| {
                let lag = i.abs_diff(j);
                if lag == 0 {
                    s2
                } else {
                    s2 * theta[lag]
                }
            })
        }
        CovarianceKind::CompoundSymmetry => {
            let s2 = theta[0];
            if s2 <= 0.0 {
                return None;
            }
            let rho = if dim > 1 { theta[1] } else { 0.0 };
            DMatrix::from_fn(dim, dim, |i, j| if i == j { s2 } else { s2 * rho })
        }
    };
    let min = psi.clone().symmetric_eigen().eigenvalues.min();
    (min > 1e-10 * psi.diagonal().max()).then_some(psi)
}

pub fn oracle_param_count(kind: CovarianceKind, dim: usize) -> usize {
    match kind {
        CovarianceKind::Unstructured => dim * (dim + 1) / 2,
        CovarianceKind::Toeplitz => dim,
        CovarianceKind::CompoundSymmetry => dim.min(2),
    }
}

/// Oracle start: structure-appropriate summary of the pooled OLS residual
/// covariance (pairwise complete, divided by pair counts).
fn oracle_start(design: &DesignMatrices<f64>, kind: CovarianceKind) -> Vec<f64> {
    let (x, y, _) = stack(design, &DMatrix::identity(design.visit_count(), design.visit_count()));
    let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
    let t = design.visit_count();
    let mut sum = DMatrix::<f64>::zeros(t, t);
    let mut cnt = DMatrix::<f64>::zeros(t, t);
    for d in design.participants() {
        let r = &d.y - &d.x * &beta;
        for (a, &s) in d.observed.iter().enumerate() {
            for (b, &u) in d.observed.iter().enumerate() {
                sum[(s, u)] += r[a] * r[b];
                cnt[(s, u)] += 1.0;
            }
        }
    }
    let mut s = sum.zip_map(&cnt, |a, c| if c > 0.0 { a / c } else { 0.0 });
    let mean_var = s.diagonal().mean();
    for i in 0..t {
        s[(i, i)] += 0.1 * mean_var;
    }
    match kind {
        CovarianceKind::Unstructured => {
            let l = s.cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(t, t) * mean_var.sqrt());
            let mut out = Vec::new();
            for i in 0..t {
                for j in 0..=i {
                    out.push(l[(i, j)]);
                }
            }
            out
        }
        CovarianceKind::Toeplitz => {
            let mut out = vec![mean_var * 1.1];
            for lag in 1..t {
                out.push(0.3_f64.powi(lag as i32));
            }
            out
        }
        CovarianceKind::CompoundSymmetry => {
            let mut out = vec![mean_var * 1.1];
            if t > 1 {
                out.push(0.3);
            }
            out
        }
    }
}

/// Hooke-Jeeves pattern search on the dense objective.
pub fn oracle_fit(design: &DesignMatrices<f64>, kind: CovarianceKind) -> (f64, DMatrix<f64>, DVector<f64>) {
    let t = design.visit_count();
    let f = |theta: &[f64]| -> f64 {
        oracle_psi(kind, t, theta).and_then(|psi| dense_reml(design, &psi)).map_or(f64::INFINITY, |v| v.0)
    };
    let mut base = oracle_start(design, kind);
    let k = base.len();
    let mut fb = f(&base);
    assert!(fb.is_finite(), "oracle start infeasible");
    let scale: Vec<f64> = base.iter().map(|v| v.abs().max(0.1)).collect();
    let mut step = 0.25;
    let explore = |point: &[f64], fp: f64, step: f64| -> (Vec<f64>, f64) {
        let mut x = point.to_vec();
        let mut fx = fp;
        for i in 0..k {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] += dir * step * scale[i];
                let fy = f(&y);
                if fy < fx {
                    x = y;
                    fx = fy;
                    break;
                }
            }
        }
        (x, fx)
    };
    let mut evals = 0usize;
    while step > 1e-11 && evals < 2_000_000 {
        let (x, fx) = explore(&base, fb, step);
        evals += 2 * k;
        if fx < fb {
            // pattern moves while they keep improving
            let mut prev = base.clone();
            base = x;
            fb = fx;
            loop {
                let probe: Vec<f64> = base.iter().zip(&prev).map(|(b, p)| 2.0 * b - p).collect();
                let fp = f(&probe);
                let (y, fy) = explore(&probe, fp, step);
                evals += 2 * k + 1;
                if fy < fb {
                    prev = base;
                    base = y;
                    fb = fy;
                } else {
                    break;
                }
            }
        } else {
            step *= 0.5;
        }
    }
    let psi = oracle_psi(kind, t, &base).unwrap();
    let (value, beta) = dense_reml(design, &psi).unwrap();
    (value, psi, beta)
}

/// Tiny monotone-missing trial with correlated visits.
pub fn tiny_dataset(seed: u64) -> (TrialDataset<f64>, ModelSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=12);
    let t = rng.random_range(1..=3);
    let mut participants = Vec::new();
    for i in 0..n {
        let arm = if i % 2 == 0 { Arm::Control } else { Arm::Treatment };
        let shared: f64 = rng.sample(StandardNormal);
        let scores: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
        let mut outcomes: Vec<Option<f64>> = (0..t)
            .map(|s| {
                let e: f64 = rng.sample(StandardNormal);
                let w = if arm == Arm::Treatment { 0.8 } else { 0.0 };
                Some(0.5 + 0.3 * s as f64 + w + 0.6 * scores[s] + 0.8 * shared + (0.6 + 0.2 * s as f64) * e)
            })
            .collect();
        // keep the first four participants complete so every visit is estimable
        if i >= 4 && t > 1 && rng.random::<f64>() < 0.35 {
            let from = rng.random_range(1..t);
            outcomes[from..].iter_mut().for_each(|y| *y = None);
        }
        participants.push(ParticipantRecord {
            id: format!("p{i}"),
            arm,
            outcomes,
            prognostic_scores: scores,
            baseline_covariates: vec![],
        });
    }
    let data = TrialDataset::new(VisitSchedule::numbered(t).unwrap(), participants, vec![]).unwrap();
    let spec = if seed.is_multiple_of(2) { ModelSpec::procova() } else { ModelSpec::unadjusted() };
    (data, spec)
}

/// Single-visit two-arm dataset.
pub fn two_sample(control: &[f64], treated: &[f64]) -> TrialDataset<f64> {
    let rec = |i: usize, arm, y: f64| ParticipantRecord {
        id: format!("q{i}"),
        arm,
        outcomes: vec![Some(y)],
        prognostic_scores: vec![0.0],
        baseline_covariates: vec![],
    };
    let mut participants: Vec<_> = control.iter().enumerate().map(|(i, &y)| rec(i, Arm::Control, y)).collect();
    participants.extend(treated.iter().enumerate().map(|(i, &y)| rec(control.len() + i, Arm::Treatment, y)));
    TrialDataset::new(VisitSchedule::numbered(1).unwrap(), participants, vec![]).unwrap()
}
