//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Central-difference step used throughout: 1e-6·(1+|x_j|).
pub fn fd_step(xj: f64) -> f64 {
    1e-6 * (1.0 + xj.abs())
}

/// Central finite-difference Jacobian of a vector map.
pub fn fd_jacobian(x: &Vector, mut map: impl FnMut(&Vector) -> Vector) -> Mat {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        let e = fd_step(x[j]);
        xp[j] = x[j] + e;
        let fp = map(&xp);
        xp[j] = x[j] - e;
        let fm = map(&xp);
        xp[j] = x[j];
        cols.push((fp - fm) / (2.0 * e));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Mat::from_fn(rows, n, |i, j| cols[j][i])
}

pub fn fd_gradient(x: &Vector, mut map: impl FnMut(&Vector) -> f64) -> Vector {
    fd_jacobian(x, |y| Vector::from_element(1, map(y))).row(0).transpose()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Real parts / moduli of the spectrum of a general square matrix.
pub fn spectrum(m: &Mat) -> Vec<(f64, f64)> {
    m.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect()
}

pub fn spectral_abscissa(m: &Mat) -> f64 {
    spectrum(m).into_iter().map(|(re, _)| re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_radius(m: &Mat) -> f64 {
    spectrum(m).into_iter().map(|(re, im)| re.hypot(im)).fold(0.0, f64::max)
}

fn solve_vectorized(op: Mat, q: &Mat, what: &str) -> Result<Mat> {
    let n = q.nrows();
    let rhs = Vector::from_column_slice(q.as_slice()) * -1.0;
    let sol = op.lu().solve(&rhs).ok_or_else(|| Error::InvalidArgument(format!("{what} equation is singular")))?;
    Ok(symmetrize(&Mat::from_column_slice(n, n, sol.as_slice())))
}

/// Solves AᵀX + XA + Q = 0.
pub fn lyapunov_continuous(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let eye = Mat::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    solve_vectorized(op, q, "continuous Lyapunov")
}

/// Solves AᵀXA − X + Q = 0.
pub fn lyapunov_discrete(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let at = a.transpose();
    let op = at.kronecker(&at) - Mat::identity(n * n, n * n);
    solve_vectorized(op, q, "discrete Lyapunov")
}

/// Exact zero-order-hold discretization of ẋ = Ax + Bu over period T (augmented exponential).
pub fn discretize_zoh(a: &Mat, b: &Mat, period: f64) -> (Mat, Mat) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = Mat::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * period));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * period));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// All `k`-element subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Orthonormal basis grown one row at a time (modified Gram-Schmidt, two passes).
#[derive(Debug, Clone, Default)]
pub struct RowBasis {
    basis: Vec<Vector>,
}

impl RowBasis {
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// Adds `r` if it is independent of the rows so far (relative tolerance `tol`).
    pub fn try_add(&mut self, r: &Vector, tol: f64) -> bool {
        let mut v = r.clone();
        // a second pass keeps Gram-Schmidt honest for nearly dependent rows
        for _ in 0..2 {
            for b in &self.basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let nv = v.norm();
        if nv > tol * (1.0 + r.norm()) {
            self.basis.push(v / nv);
            true
        } else {
            false
        }
    }
}

/// Indices of a maximal linearly independent prefix-greedy subset of `rows`.
pub fn independent_rows(rows: &[Vector], tol: f64) -> Vec<usize> {
    let mut basis = RowBasis::default();
    (0..rows.len()).filter(|&i| basis.try_add(&rows[i], tol)).collect()
}
