//! Small dense helpers on top of nalgebra used by the estimation code.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub(crate) fn cholesky<T: Real>(m: &DMatrix<T>, what: &str) -> Result<Cholesky<T, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::Decomposition(what.to_string()))
}

/// log-determinant of an SPD matrix from its Cholesky factor.
pub(crate) fn chol_logdet<T: Real>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    let mut acc = T::zero();
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    acc * T::lit(2.0)
}

pub(crate) fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    let eig = SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Indices of columns of a Gram matrix that are (numerically) linear
/// combinations of earlier columns, found by a sequential Cholesky sweep
/// that skips dependent pivots.
pub(crate) fn aliased_columns<T: Real>(gram: &DMatrix<T>) -> Vec<usize> {
    let p = gram.nrows();
    let tol = T::lit(1e-9);
    let mut l = DMatrix::<T>::zeros(p, p);
    let mut kept = vec![false; p];
    let mut aliased = Vec::new();
    for j in 0..p {
        let mut d = gram[(j, j)];
        for k in 0..j {
            if kept[k] {
                d -= l[(j, k)] * l[(j, k)];
            }
        }
        let scale = gram[(j, j)].abs();
        if scale <= T::zero() || d <= tol * scale {
            aliased.push(j);
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        kept[j] = true;
        for i in (j + 1)..p {
            let mut s = gram[(i, j)];
            for k in 0..j {
                if kept[k] {
                    s -= l[(i, k)] * l[(j, k)];
                }
            }
            l[(i, j)] = s / djj;
        }
    }
    aliased
}

/// Moore-Penrose inverse of a symmetric matrix; eigenvalues below
/// `rel_tol * max|eigenvalue|` are treated as zero.
pub(crate) fn pinv_symmetric<T: Real>(m: &DMatrix<T>, rel_tol: T) -> DMatrix<T> {
    let eig = SymmetricEigen::new(m.clone());
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    let cutoff = max_abs * rel_tol;
    let n = m.nrows();
    let mut out = DMatrix::<T>::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logdet_matches_determinant() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let chol = cholesky(&m, "m").unwrap();
        assert_relative_eq!(chol_logdet(&chol), 11.0_f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn detects_duplicate_and_zero_columns() {
        // columns: a, b, a + b, 0
        let x = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.0, 1.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 1.0, 1.0, 0.0, 2.0, 1.0, 3.0, 0.0],
        );
        let gram = x.transpose() * &x;
        assert_eq!(aliased_columns(&gram), vec![2, 3]);
    }

    #[test]
    fn pinv_of_rank_one() {
        let v = nalgebra::DVector::from_vec(vec![1.0, 2.0]);
        let m = &v * v.transpose();
        let p = pinv_symmetric(&m, 1e-12);
        let back = &m * &p * &m;
        assert_relative_eq!(back, m, epsilon = 1e-12);
    }
}
