//! Unconstrained minimizers used for the covariance parameters: BFGS with
//! a backtracking line search, a finite-difference Newton polish, and a
//! Nelder-Mead simplex as a derivative-free rescue.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Tolerances {
    pub max_iterations: usize,
    pub gradient: f64,
    pub relative_objective: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome<T: Real> {
    pub x: DVector<T>,
    pub value: T,
    pub gradient: DVector<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub last_relative_change: f64,
}

impl<T: Real> Outcome<T> {
    pub fn gradient_norm(&self) -> f64 {
        max_abs(&self.gradient)
    }
}

pub(crate) fn max_abs<T: Real>(v: &DVector<T>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.as_f64().abs()))
}

fn relative_change<T: Real>(old: T, new: T) -> f64 {
    let (o, n) = (old.as_f64(), new.as_f64());
    (o - n).abs() / o.abs().max(1.0)
}

/// Objective returning value and gradient, or `None` where it is undefined.
pub(crate) trait Objective<T: Real> {
    fn eval(&mut self, x: &DVector<T>) -> Option<(T, DVector<T>)>;
}

impl<T: Real, F: FnMut(&DVector<T>) -> Option<(T, DVector<T>)>> Objective<T> for F {
    fn eval(&mut self, x: &DVector<T>) -> Option<(T, DVector<T>)> {
        self(x)
    }
}

struct Step<T: Real> {
    x: DVector<T>,
    value: T,
    gradient: DVector<T>,
}

/// Backtracking search along `dir`; accepts the Armijo condition, or an
/// approximate-Wolfe point when the value change is within rounding noise
/// and the directional derivative has flattened.
fn line_search<T: Real>(
    f: &mut impl Objective<T>,
    evals: &mut usize,
    x: &DVector<T>,
    value: T,
    grad: &DVector<T>,
    dir: &DVector<T>,
    first_step: T,
) -> Option<Step<T>> {
    let slope = grad.dot(dir);
    if slope >= T::zero() {
        return None;
    }
    let c1 = T::lit(1e-4);
    let noise = T::lit(1e-12) * (T::one() + value.abs()) + T::default_epsilon() * T::lit(64.0) * value.abs();
    let mut alpha = first_step;
    for _ in 0..40 {
        let trial = x + dir * alpha;
        *evals += 1;
        if let Some((fv, g)) = f.eval(&trial) {
            if fv.is_finite() {
                if fv <= value + c1 * alpha * slope {
                    return Some(Step { x: trial, value: fv, gradient: g });
                }
                let new_slope = g.dot(dir);
                if fv <= value + noise && new_slope.abs() <= -slope * T::lit(0.9) {
                    return Some(Step { x: trial, value: fv, gradient: g });
                }
                // minimizer of the quadratic through (0, value, slope) and (alpha, fv)
                let denom = T::lit(2.0) * (fv - value - slope * alpha);
                let next = if denom > T::zero() { -slope * alpha * alpha / denom } else { alpha * T::lit(0.5) };
                alpha = next.max(alpha * T::lit(0.1)).min(alpha * T::lit(0.5));
                continue;
            }
        }
        alpha *= T::lit(0.2);
    }
    None
}

pub(crate) fn bfgs<T: Real>(f: &mut impl Objective<T>, x0: DVector<T>, tol: &Tolerances) -> Option<Outcome<T>> {
    let n = x0.len();
    let mut evals = 1;
    let (mut value, mut grad) = f.eval(&x0)?;
    if !value.is_finite() {
        return None;
    }
    let mut x = x0;
    let mut h_inv = DMatrix::<T>::identity(n, n);
    let mut fresh = true;
    let mut rel = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < tol.max_iterations {
        if max_abs(&grad) < tol.gradient && rel < tol.relative_objective {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &grad);
        if grad.dot(&dir) >= T::zero() {
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            dir = -grad.clone();
        }
        let first = if fresh {
            T::one().min(T::one() / T::lit(max_abs(&grad).max(1e-300)))
        } else {
            T::one()
        };
        let step = match line_search(f, &mut evals, &x, value, &grad, &dir, first) {
            Some(s) => s,
            None if !fresh => {
                h_inv = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            None => {
                // cannot decrease further: converged if the gradient is already small
                rel = 0.0;
                converged = max_abs(&grad) < tol.gradient;
                break;
            }
        };
        iterations += 1;
        let s = &step.x - &x;
        let y = &step.gradient - &grad;
        let sy = s.dot(&y);
        if sy > T::lit(1e-12) * s.norm() * y.norm() {
            if fresh {
                h_inv *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = T::one() / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h_inv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        rel = relative_change(value, step.value);
        x = step.x;
        value = step.value;
        grad = step.gradient;
    }
    if !converged && max_abs(&grad) < tol.gradient && rel < tol.relative_objective {
        converged = true;
    }
    Some(Outcome { x, value, gradient: grad, iterations, evaluations: evals, converged, last_relative_change: rel })
}

/// Newton iterations with a central-difference Hessian of the gradient;
/// eigenvalues are flipped/floored so every step is a descent direction.
pub(crate) fn newton_polish<T: Real>(f: &mut impl Objective<T>, start: Outcome<T>, tol: &Tolerances, max_steps: usize) -> Outcome<T> {
    let mut out = start;
    let n = out.x.len();
    for _ in 0..max_steps {
        if max_abs(&out.gradient) < tol.gradient && out.last_relative_change < tol.relative_objective {
            out.converged = true;
            return out;
        }
        let mut hess = DMatrix::<T>::zeros(n, n);
        let mut ok = true;
        for j in 0..n {
            let h = T::lit(1e-5) * out.x[j].abs().max(T::one());
            let mut up = out.x.clone();
            up[j] += h;
            let mut dn = out.x.clone();
            dn[j] -= h;
            out.evaluations += 2;
            match (f.eval(&up), f.eval(&dn)) {
                (Some((_, gu)), Some((_, gd))) => hess.set_column(j, &((gu - gd) / (T::lit(2.0) * h))),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let sym = (&hess + hess.transpose()) * T::lit(0.5);
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.iter().fold(T::zero(), |a, l| a.max(l.abs()));
        let floor = scale * T::lit(1e-10) + T::lit(1e-300);
        let mut dir = DVector::<T>::zeros(n);
        for (k, &l) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            let coef = v.dot(&out.gradient) / l.abs().max(floor);
            dir -= v * coef;
        }
        let mut evals = 0;
        let step = line_search(f, &mut evals, &out.x, out.value, &out.gradient, &dir, T::one());
        out.evaluations += evals;
        match step {
            Some(s) => {
                out.iterations += 1;
                out.last_relative_change = relative_change(out.value, s.value);
                out.x = s.x;
                out.value = s.value;
                out.gradient = s.gradient;
            }
            None => {
                out.last_relative_change = 0.0;
                break;
            }
        }
    }
    out.converged = max_abs(&out.gradient) < tol.gradient && out.last_relative_change < tol.relative_objective;
    out
}

/// Nelder-Mead on the objective value only. Returns the best vertex.
pub(crate) fn nelder_mead<T: Real>(
    f: &mut impl Objective<T>,
    x0: &DVector<T>,
    initial_step: T,
    max_evaluations: usize,
) -> Option<(DVector<T>, T, usize)> {
    let n = x0.len();
    let value_of = |f: &mut dyn Objective<T>, x: &DVector<T>| -> T {
        match f.eval(x) {
            Some((v, _)) if v.is_finite() => v,
            _ => T::max_value().unwrap(),
        }
    };
    let mut call = |x: &DVector<T>| f.eval(x);
    let mut simplex: Vec<(DVector<T>, T)> = Vec::with_capacity(n + 1);
    let v0 = value_of(&mut call, x0);
    simplex.push((x0.clone(), v0));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += initial_step;
        let v = value_of(&mut call, &x);
        simplex.push((x, v));
    }
    let mut evals = n + 1;
    let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));
    while evals < max_evaluations {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = (worst - best).abs().as_f64();
        if spread <= 1e-13 * best.abs().as_f64().max(1.0) {
            break;
        }
        let mut centroid = DVector::<T>::zeros(n);
        for (x, _) in &simplex[..n] {
            centroid += x;
        }
        centroid /= T::from_count(n);
        let xr = &centroid + (&centroid - &simplex[n].0) * alpha;
        let fr = value_of(&mut call, &xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = &centroid + (&xr - &centroid) * gamma;
            let fe = value_of(&mut call, &xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = &centroid + (&xr - &centroid) * rho;
                let fc = value_of(&mut call, &xc);
                (xc, fc)
            } else {
                let xc = &centroid + (&simplex[n].0 - &centroid) * rho;
                let fc = value_of(&mut call, &xc);
                (xc, fc)
            };
            evals += 1;
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x = &x_best + (&vertex.0 - &x_best) * sigma;
                    let v = value_of(&mut call, &x);
                    *vertex = (x, v);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    let (x, v) = simplex.swap_remove(0);
    (v < T::max_value().unwrap()).then_some((x, v, evals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        Some((v, g))
    }

    const TOL: Tolerances = Tolerances { max_iterations: 200, gradient: 1e-8, relative_objective: 1e-12 };

    #[test]
    fn bfgs_solves_rosenbrock() {
        let mut f = rosenbrock;
        let out = bfgs(&mut f, DVector::from_vec(vec![-1.2, 1.0]), &TOL).unwrap();
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn newton_polish_finishes_quadratic() {
        let mut f = |x: &DVector<f64>| {
            let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
            let g = &a * x - DVector::from_vec(vec![1.0, 1.0]);
            Some((0.5 * x.dot(&(&a * x)) - x.sum(), g))
        };
        let (v, g) = f(&DVector::zeros(2)).unwrap();
        let start = Outcome {
            x: DVector::zeros(2),
            value: v,
            gradient: g,
            iterations: 0,
            evaluations: 1,
            converged: false,
            last_relative_change: f64::INFINITY,
        };
        let out = newton_polish(&mut f, start, &TOL, 5);
        assert!(out.converged);
        assert!((out.x[0] - 0.2).abs() < 1e-9 && (out.x[1] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn nelder_mead_finds_bowl_minimum() {
        let mut f = |x: &DVector<f64>| Some(((x[0] - 2.0).powi(2) + 3.0 * (x[1] + 1.0).powi(2), DVector::zeros(2)));
        let (x, v, _) = nelder_mead(&mut f, &DVector::zeros(2), 0.5, 2000).unwrap();
        assert!(v < 1e-10);
        assert!((x[0] - 2.0).abs() < 1e-5 && (x[1] + 1.0).abs() < 1e-5);
    }
}
