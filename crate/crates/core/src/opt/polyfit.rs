//! Least-squares regression over the full multivariate monomial basis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

/// Largest degree accepted by [`polyfit`]; higher degrees are badly conditioned on grids.
pub const MAX_DEGREE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub dim: usize,
    /// One exponent tuple per monomial, graded lexicographic order.
    pub exponents: Vec<Vec<u32>>,
    pub coefficients: Vec<f64>,
}

/// Exponent tuples of total degree ≤ `degree`: constant first, then by degree.
pub fn monomials(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut cur = vec![0u32; dim];
        fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if i + 1 == cur.len() {
                cur[i] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[i] = e;
                rec(i + 1, left - e, cur, out);
            }
        }
        if dim == 0 {
            if total == 0 {
                out.push(Vec::new());
            }
            continue;
        }
        rec(0, total, &mut cur, &mut out);
    }
    out
}

fn monomial(x: &[f64], e: &[u32]) -> f64 {
    x.iter().zip(e).map(|(xi, &k)| xi.powi(k as i32)).product()
}

impl Polynomial {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents.iter().zip(&self.coefficients).map(|(e, c)| c * monomial(x, e)).sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (e, c) in self.exponents.iter().zip(&self.coefficients) {
            for j in 0..self.dim {
                if e[j] == 0 {
                    continue;
                }
                let mut d = e.clone();
                d[j] -= 1;
                g[j] += c * e[j] as f64 * monomial(x, &d);
            }
        }
        g
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().map(|e| e.iter().sum()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct PolyFit {
    pub polynomial: Polynomial,
    pub max_residual: f64,
}

pub fn polyfit(samples: &[(Vec<f64>, f64)], degree: usize) -> Result<PolyFit> {
    if degree > MAX_DEGREE {
        return Err(Error::InvalidArgument(format!("degree {degree} exceeds the supported maximum {MAX_DEGREE}")));
    }
    let dim = samples.first().map(|s| s.0.len()).ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    if samples.iter().any(|s| s.0.len() != dim) {
        return Err(Error::Dimension("samples have different dimensions".into()));
    }
    let basis = monomials(dim, degree);
    let nb = basis.len();
    if samples.len() < nb {
        return Err(Error::InvalidArgument(format!("{} samples cannot determine {nb} coefficients", samples.len())));
    }
    let mut v = Mat::from_fn(samples.len(), nb, |i, j| monomial(&samples[i].0, &basis[j]));
    let y = Vector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    // column equilibration keeps the rank test meaningful across monomial scales
    let scales: Vec<f64> = (0..nb).map(|j| v.column(j).norm().max(1e-300)).collect();
    for j in 0..nb {
        let s = scales[j];
        v.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax * (samples.len().max(nb) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < nb {
        return Err(Error::RankDeficient { rank, needed: nb });
    }
    let c = svd.solve(&y, tol).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let coefficients: Vec<f64> = (0..nb).map(|j| c[j] / scales[j]).collect();
    let polynomial = Polynomial { dim, exponents: basis, coefficients };
    let max_residual = samples.iter().map(|(x, val)| (polynomial.eval(x) - val).abs()).fold(0.0, f64::max);
    Ok(PolyFit { polynomial, max_residual })
}
