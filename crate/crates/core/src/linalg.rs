//! Small dense/sparse complex matrix helpers shared by the propagators.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Largest elementwise |a - a^dagger|.
pub fn hermiticity_defect_max(a: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Frobenius norm of a - a^dagger.
pub fn hermiticity_defect_fro(a: &CMatrix) -> f64 {
    (a - a.adjoint()).norm()
}

pub fn ensure_square(a: &CMatrix, context: &'static str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    Ok(a.nrows())
}

pub fn ensure_hermitian(a: &CMatrix, what: &'static str, tol: f64) -> Result<()> {
    ensure_square(a, what)?;
    let deviation = hermiticity_defect_max(a);
    if !(deviation <= tol) {
        return Err(Error::NotHermitian { what, deviation });
    }
    Ok(())
}

pub fn trace(a: &CMatrix) -> C64 {
    a.diagonal().iter().sum()
}

/// Hermitian part (a + a^dagger)/2.
pub fn hermitian_part(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * real(0.5)
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted ascending
/// and eigenvectors stored column-wise in the same order.
pub fn eigh(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = a.nrows();
    let herm = hermitian_part(a);
    let eig = SymmetricEigen::new(herm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Row-compressed copy of a square matrix holding only its nonzero entries.
///
/// Propagation on chains spends almost all of its time in commutators with a
/// tridiagonal Hamiltonian, where this beats a dense product by a factor ~n/3.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    n: usize,
    rows: Vec<Vec<(usize, C64)>>,
    cols: Vec<Vec<(usize, C64)>>,
}

impl SparseMatrix {
    pub fn from_dense(a: &CMatrix) -> Self {
        let n = a.nrows();
        let mut rows = vec![Vec::new(); n];
        let mut cols = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if v != C64::new(0.0, 0.0) {
                    rows[i].push((j, v));
                    cols[j].push((i, v));
                }
            }
        }
        Self { n, rows, cols }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// out = self * a - a * self
    pub fn commutator_into(&self, a: &CMatrix, out: &mut CMatrix) {
        let n = self.n;
        debug_assert_eq!(a.nrows(), n);
        for c in 0..n {
            for r in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for &(k, h) in &self.rows[r] {
                    acc += h * a[(k, c)];
                }
                for &(k, h) in &self.cols[c] {
                    acc -= a[(r, k)] * h;
                }
                out[(r, c)] = acc;
            }
        }
    }
}

/// Cayley factors for a step of length dt under the generator h:
/// returns (M, P) with M = (1 + i h dt/2)^-1 and P = 1 - i h dt/2, so that the
/// Crank-Nicolson propagator is U = M P.
pub fn cayley_factors(h: &CMatrix, dt: f64) -> Result<(CMatrix, CMatrix)> {
    let n = h.nrows();
    let id = CMatrix::identity(n, n);
    let k = h * (I * dt * 0.5);
    let plus = &id + &k;
    let minus = &id - &k;
    let inv = plus
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Crank-Nicolson matrix".into()))?;
    Ok((inv, minus))
}

/// y += a * x, elementwise.
pub fn axpy(y: &mut CMatrix, a: C64, x: &CMatrix) {
    for (yi, xi) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yi += a * xi;
    }
}

/// Spectral-norm upper bound via the maximum absolute row sum.
pub fn norm_bound(a: &CMatrix) -> f64 {
    a.row_iter()
        .map(|row| row.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CMatrix {
        CMatrix::from_row_slice(
            3,
            3,
            &[
                real(1.0),
                C64::new(0.5, 0.2),
                real(0.0),
                C64::new(0.5, -0.2),
                real(-1.0),
                C64::new(0.0, 0.3),
                real(0.0),
                C64::new(0.0, -0.3),
                real(2.0),
            ],
        )
    }

    #[test]
    fn sparse_commutator_matches_dense() {
        let h = sample();
        let a = CMatrix::from_fn(3, 3, |i, j| C64::new(i as f64 + 0.1, j as f64 - 0.4));
        let mut out = CMatrix::zeros(3, 3);
        let sparse = SparseMatrix::from_dense(&h);
        assert_eq!(sparse.nnz(), 7);
        sparse.commutator_into(&a, &mut out);
        let dense = &h * &a - &a * &h;
        assert!((out - dense).norm() < 1e-14);
    }

    #[test]
    fn eigh_sorted_and_reconstructs() {
        let h = sample();
        let (vals, vecs) = eigh(&h);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            3,
            vals.iter().map(|&v| real(v)),
        ));
        let back = &vecs * diag * vecs.adjoint();
        assert!((back - h).norm() < 1e-12);
    }

    #[test]
    fn cayley_is_unitary_for_hermitian_generator() {
        let h = sample();
        let (m, p) = cayley_factors(&h, 0.3).unwrap();
        let u = m * p;
        let id = CMatrix::identity(3, 3);
        assert!((&u * u.adjoint() - id).norm() < 1e-14);
    }

    #[test]
    fn hermiticity_checks() {
        let mut h = sample();
        assert!(ensure_hermitian(&h, "h", 1e-14).is_ok());
        h[(0, 1)] += C64::new(1e-6, 0.0);
        assert!(matches!(
            ensure_hermitian(&h, "h", 1e-14),
            Err(Error::NotHermitian { .. })
        ));
    }
}
