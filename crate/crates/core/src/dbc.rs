//! Robust discrete barrier condition (DBC) and its QP safety filter.
//!
//! With disturbances w = (w_f, w_B, w_h, w_∇h) standing in for how far f, B, h and ∇h
//! can move within one sampling period,
//!
//! ```text
//! DBC(x,u,w) = (∇h+w_∇h)ᵀ(f+w_f+(B+w_B)u) + α(h+w_h) = −a(x,w)ᵀu − b(x,w)
//! ```
//!
//! and the filter requires DBC ≥ 0 for every w ∈ W. Bounding a and b by a box and
//! dualizing the inner maximization gives affine conditions in (u, λ̃):
//! `dᵀλ̃ ≤ 0, Dᵀλ̃ = [u; 1], λ̃ ≥ 0`.

use crate::bounds::{Disturbance, DisturbanceSet};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{checked_velocity, Cbf, ControlAffineSystem, Polytope};
use crate::opt::qp::{solve_qp_with, QpOptions, QpProblem, QpStatus};

/// Default cap on enumerated disturbance vertices.
pub const DEFAULT_VERTEX_CAP: u128 = 1 << 20;

/// Evaluated nominal quantities at a state.
struct Nominal {
    f: Vector,
    b: Mat,
    h: f64,
    g: Vector,
}

fn nominal(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector) -> Result<Nominal> {
    let n = sys.state_dim();
    if x.len() != n || cbf.barrier.dim() != n {
        return Err(Error::Dimension(format!("state has {} entries, system {n}, barrier {}", x.len(), cbf.barrier.dim())));
    }
    checked_velocity(sys, x, &Vector::zeros(sys.input_dim()))?;
    Ok(Nominal { f: sys.drift(x), b: sys.input_matrix(x), h: cbf.h(x), g: cbf.grad_h(x) })
}

fn coefficients(nom: &Nominal, cbf: &Cbf, w: &Disturbance) -> (Vector, f64) {
    let gw = &nom.g + &w.w_grad_h;
    let a = -((&nom.b + &w.w_b).transpose() * &gw);
    let b = -gw.dot(&(&nom.f + &w.w_f)) - cbf.alpha(nom.h + w.w_h);
    (a, b)
}

/// a(x,w) = −(B+w_B)ᵀ(∇h+w_∇h), b(x,w) = −(∇h+w_∇h)ᵀ(f+w_f) − α(h+w_h).
pub fn affine_coefficients(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector, w: &Disturbance) -> Result<(Vector, f64)> {
    let nom = nominal(sys, cbf, x)?;
    Ok(coefficients(&nom, cbf, w))
}

pub fn eval_dbc(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector, u: &Vector, w: &Disturbance) -> Result<f64> {
    if u.len() != sys.input_dim() || w.w_f.len() != sys.state_dim() || w.w_b.shape() != (sys.state_dim(), sys.input_dim()) || w.w_grad_h.len() != sys.state_dim() {
        return Err(Error::Dimension("input or disturbance does not match the system".into()));
    }
    let nom = nominal(sys, cbf, x)?;
    let gw = &nom.g + &w.w_grad_h;
    Ok(gw.dot(&(&nom.f + &w.w_f + (&nom.b + &w.w_b) * u)) + cbf.alpha(nom.h + w.w_h))
}

/// Interval hull of a(x, W) and b(x, W) at a fixed state.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBounds {
    pub a_lo: Vector,
    pub a_hi: Vector,
    pub b_lo: f64,
    pub b_hi: f64,
}

impl CoefficientBounds {
    pub fn input_dim(&self) -> usize {
        self.a_lo.len()
    }

    /// d(x) = [ā₁, −a̲₁, …, ā_m, −a̲_m, b̄, −b̲].
    pub fn d(&self) -> Vector {
        let m = self.input_dim();
        let mut d = Vector::zeros(2 * (m + 1));
        for j in 0..m {
            d[2 * j] = self.a_hi[j];
            d[2 * j + 1] = -self.a_lo[j];
        }
        d[2 * m] = self.b_hi;
        d[2 * m + 1] = -self.b_lo;
        d
    }

    /// D ∈ R^{2(m+1)×(m+1)}: rows e_j and −e_j interleaved.
    pub fn d_matrix(&self) -> Mat {
        let m = self.input_dim();
        let mut dm = Mat::zeros(2 * (m + 1), m + 1);
        for j in 0..=m {
            dm[(2 * j, j)] = 1.0;
            dm[(2 * j + 1, j)] = -1.0;
        }
        dm
    }

    /// max over the coefficient box of ãᵀu + b̃ (vertex enumeration of the box).
    pub fn worst_case(&self, u: &Vector) -> f64 {
        (0..self.input_dim()).map(|j| (self.a_hi[j] * u[j]).max(self.a_lo[j] * u[j])).sum::<f64>() + self.b_hi
    }
}

/// Coordinates of a box that actually vary, with their fixed value otherwise.
fn free_coords(lo: &Vector, hi: &Vector) -> Vec<usize> {
    (0..lo.len()).filter(|&i| lo[i] < hi[i]).collect()
}

fn check_cap(k: usize, cap: u128) -> Result<()> {
    let count = 1u128.checked_shl(k as u32).unwrap_or(u128::MAX);
    if count > cap {
        return Err(Error::VertexCap { count, cap });
    }
    Ok(())
}

/// Iterates over every combination of endpoints of `coords`, writing into `w`.
fn for_each_vertex(slots: &[(&Vector, &Vector)], coords: &[(usize, usize)], mut apply: impl FnMut(&[f64])) {
    let k = coords.len();
    let mut vals = vec![0.0; k];
    for mask in 0..(1u64 << k) {
        for (bit, &(s, i)) in coords.iter().enumerate() {
            let (lo, hi) = slots[s];
            vals[bit] = if mask >> bit & 1 == 1 { hi[i] } else { lo[i] };
        }
        apply(&vals);
    }
}

/// Exact extrema of a_j(x,·) and b(x,·) over W by enumerating the vertices of the
/// disturbance coordinates each coefficient depends on (a, b are multilinear in w and α is
/// monotone, so the extrema sit at vertices).
pub fn coefficient_bounds(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector, w: &DisturbanceSet, cap: u128) -> Result<CoefficientBounds> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    if w.n != n || w.m != m {
        return Err(Error::Dimension("disturbance set does not match the system".into()));
    }
    let nom = nominal(sys, cbf, x)?;
    let mut a_lo = Vector::zeros(m);
    let mut a_hi = Vector::zeros(m);
    let g_free = free_coords(&w.w_grad_h.lo, &w.w_grad_h.hi);
    for j in 0..m {
        // a_j = −Σ_i (B_ij + wB_ij)(g_i + wg_i): depends on column j of w_B and on w_∇h
        let col: Vec<usize> = (0..n).map(|i| i + j * n).collect();
        let b_free: Vec<usize> = col.iter().copied().filter(|&r| w.w_b.lo[r] < w.w_b.hi[r]).collect();
        let coords: Vec<(usize, usize)> = b_free.iter().map(|&r| (0, r)).chain(g_free.iter().map(|&i| (1, i))).collect();
        check_cap(coords.len(), cap)?;
        let slots = [(&w.w_b.lo, &w.w_b.hi), (&w.w_grad_h.lo, &w.w_grad_h.hi)];
        let mut wb = w.w_b.lo.clone();
        let mut wg = w.w_grad_h.lo.clone();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for_each_vertex(&slots, &coords, |vals| {
            for (bit, &(s, i)) in coords.iter().enumerate() {
                if s == 0 {
                    wb[i] = vals[bit];
                } else {
                    wg[i] = vals[bit];
                }
            }
            let v: f64 = -(0..n).map(|i| (nom.b[(i, j)] + wb[i + j * n]) * (nom.g[i] + wg[i])).sum::<f64>();
            lo = lo.min(v);
            hi = hi.max(v);
        });
        a_lo[j] = lo;
        a_hi[j] = hi;
    }
    // b = −(g + wg)ᵀ(f + wf) − α(h + wh)
    let f_free = free_coords(&w.w_f.lo, &w.w_f.hi);
    let h_free = free_coords(&w.w_h.lo, &w.w_h.hi);
    let coords: Vec<(usize, usize)> = f_free.iter().map(|&i| (0, i)).chain(g_free.iter().map(|&i| (1, i))).chain(h_free.iter().map(|&i| (2, i))).collect();
    check_cap(coords.len(), cap)?;
    let slots = [(&w.w_f.lo, &w.w_f.hi), (&w.w_grad_h.lo, &w.w_grad_h.hi), (&w.w_h.lo, &w.w_h.hi)];
    let mut wf = w.w_f.lo.clone();
    let mut wg = w.w_grad_h.lo.clone();
    let mut wh = w.w_h.lo[0];
    let (mut b_lo, mut b_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for_each_vertex(&slots, &coords, |vals| {
        for (bit, &(s, i)) in coords.iter().enumerate() {
            match s {
                0 => wf[i] = vals[bit],
                1 => wg[i] = vals[bit],
                _ => wh = vals[bit],
            }
        }
        let v = -(&nom.g + &wg).dot(&(&nom.f + &wf)) - cbf.alpha(nom.h + wh);
        b_lo = b_lo.min(v);
        b_hi = b_hi.max(v);
    });
    Ok(CoefficientBounds { a_lo, a_hi, b_lo, b_hi })
}

/// max over all vertices of W of a(x,w)ᵀu + b(x,w); the robust DBC holds iff this is ≤ 0.
pub fn robust_dbc_margin(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector, u: &Vector, w: &DisturbanceSet, cap: u128) -> Result<f64> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    if w.n != n || w.m != m || u.len() != m {
        return Err(Error::Dimension("input or disturbance set does not match the system".into()));
    }
    let nom = nominal(sys, cbf, x)?;
    let boxes = [&w.w_f, &w.w_b, &w.w_h, &w.w_grad_h];
    let coords: Vec<(usize, usize)> = boxes.iter().enumerate().flat_map(|(s, bx)| free_coords(&bx.lo, &bx.hi).into_iter().map(move |i| (s, i))).collect();
    check_cap(coords.len(), cap)?;
    let slots: Vec<(&Vector, &Vector)> = boxes.iter().map(|bx| (&bx.lo, &bx.hi)).collect();
    let mut dist = Disturbance { w_f: w.w_f.lo.clone(), w_b: Mat::from_column_slice(n, m, w.w_b.lo.as_slice()), w_h: w.w_h.lo[0], w_grad_h: w.w_grad_h.lo.clone() };
    let mut worst = f64::NEG_INFINITY;
    for_each_vertex(&slots, &coords, |vals| {
        for (bit, &(s, i)) in coords.iter().enumerate() {
            match s {
                0 => dist.w_f[i] = vals[bit],
                1 => dist.w_b.as_mut_slice()[i] = vals[bit],
                2 => dist.w_h = vals[bit],
                _ => dist.w_grad_h[i] = vals[bit],
            }
        }
        let (a, b) = coefficients(&nom, cbf, &dist);
        worst = worst.max(a.dot(u) + b);
    });
    Ok(worst)
}

/// Brute-force oracle: DBC(x,u,w) ≥ 0 at every vertex of W.
pub fn robust_dbc_holds(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector, u: &Vector, w: &DisturbanceSet, cap: u128) -> Result<bool> {
    Ok(robust_dbc_margin(sys, cbf, x, u, w, cap)? <= 0.0)
}

/// The affine system dᵀλ̃ ≤ 0, Dᵀλ̃ = [u; 1], λ̃ ≥ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConditions {
    pub d: Vector,
    pub d_matrix: Mat,
}

pub fn affine_safety_conditions(bounds: &CoefficientBounds) -> AffineConditions {
    AffineConditions { d: bounds.d(), d_matrix: bounds.d_matrix() }
}

impl AffineConditions {
    pub fn input_dim(&self) -> usize {
        self.d_matrix.ncols() - 1
    }

    pub fn lambda_dim(&self) -> usize {
        self.d.len()
    }

    /// Largest violation among the three condition blocks (≤ 0 means satisfied).
    pub fn violation(&self, u: &Vector, lambda: &Vector) -> f64 {
        let m = self.input_dim();
        let mut ut = Vector::zeros(m + 1);
        ut.rows_mut(0, m).copy_from(u);
        ut[m] = 1.0;
        let objective = self.d.dot(lambda);
        let eq = (self.d_matrix.transpose() * lambda - ut).amax();
        let neg = lambda.iter().fold(0.0_f64, |acc, l| acc.max(-l));
        objective.max(eq).max(neg)
    }

    pub fn is_satisfied(&self, u: &Vector, lambda: &Vector, tol: f64) -> bool {
        self.violation(u, lambda) <= tol
    }

    /// The λ̃ minimizing dᵀλ̃ for a given u (and that minimum). Each pair carries only the
    /// positive or negative part of u_j, the last pair carries the 1.
    pub fn best_lambda(&self, u: &Vector) -> (Vector, f64) {
        let m = self.input_dim();
        let mut l = Vector::zeros(2 * (m + 1));
        for j in 0..m {
            if u[j] >= 0.0 {
                l[2 * j] = u[j];
            } else {
                l[2 * j + 1] = -u[j];
            }
        }
        l[2 * m] = 1.0;
        let v = self.d.dot(&l);
        (l, v)
    }

    /// Constraint rows over z = [u; λ̃]: (A_eq, b_eq, A_in, b_in).
    pub fn rows(&self) -> (Mat, Vector, Mat, Vector) {
        let m = self.input_dim();
        let nl = self.lambda_dim();
        let dz = m + nl;
        let mut a_eq = Mat::zeros(m + 1, dz);
        let mut b_eq = Vector::zeros(m + 1);
        let dt = self.d_matrix.transpose();
        for r in 0..=m {
            for k in 0..nl {
                a_eq[(r, m + k)] = dt[(r, k)];
            }
            if r < m {
                a_eq[(r, r)] = -1.0;
            } else {
                b_eq[r] = 1.0;
            }
        }
        let mut a_in = Mat::zeros(1 + nl, dz);
        let mut b_in = Vector::zeros(1 + nl);
        for k in 0..nl {
            a_in[(0, m + k)] = self.d[k];
            a_in[(1 + k, m + k)] = -1.0;
        }
        b_in[0] = 0.0;
        (a_eq, b_eq, a_in, b_in)
    }
}

#[derive(Debug, Clone)]
pub struct FilterSolution {
    pub u: Vector,
    pub lambda: Vector,
    pub bounds: CoefficientBounds,
    pub iterations: usize,
    /// True when u_nom already satisfied the conditions.
    pub passthrough: bool,
}

/// argmin ‖u − u_nom‖² over the affine DBC conditions and u ∈ U.
pub fn safety_filter_detailed(sys: &dyn ControlAffineSystem, cbf: &Cbf, w: &DisturbanceSet, x: &Vector, u_nom: &Vector, u_set: &Polytope) -> Result<FilterSolution> {
    let m = sys.input_dim();
    if u_nom.len() != m || u_set.dim() != m {
        return Err(Error::Dimension("nominal input / input set do not match the system".into()));
    }
    let bounds = coefficient_bounds(sys, cbf, x, w, DEFAULT_VERTEX_CAP)?;
    let cond = affine_safety_conditions(&bounds);
    let (lam_nom, val_nom) = cond.best_lambda(u_nom);
    if val_nom <= 0.0 && u_set.contains(u_nom, 0.0) {
        return Ok(FilterSolution { u: u_nom.clone(), lambda: lam_nom, bounds, iterations: 0, passthrough: true });
    }
    let nl = cond.lambda_dim();
    let dz = m + nl;
    let (a_eq, b_eq, a_rows, b_rows) = cond.rows();
    let pu = u_set.a.nrows();
    let mut a_in = Mat::zeros(a_rows.nrows() + pu, dz);
    let mut b_in = Vector::zeros(a_rows.nrows() + pu);
    a_in.view_mut((0, 0), (a_rows.nrows(), dz)).copy_from(&a_rows);
    b_in.rows_mut(0, a_rows.nrows()).copy_from(&b_rows);
    for r in 0..pu {
        for j in 0..m {
            a_in[(a_rows.nrows() + r, j)] = u_set.a[(r, j)];
        }
        b_in[a_rows.nrows() + r] = u_set.b[r];
    }
    let mut h = Mat::zeros(dz, dz);
    let mut g = Vector::zeros(dz);
    for j in 0..m {
        h[(j, j)] = 2.0;
        g[j] = -2.0 * u_nom[j];
    }
    let qp = QpProblem::new(h, g).with_equalities(a_eq, b_eq).with_inequalities(a_in, b_in);
    let sol = solve_qp_with(&qp, &QpOptions::default())?;
    match sol.status {
        QpStatus::Optimal => {
            let u = sol.z.rows(0, m).into_owned();
            let lambda = sol.z.rows(m, nl).into_owned();
            Ok(FilterSolution { u, lambda, bounds, iterations: sol.iterations, passthrough: false })
        }
        _ => Err(Error::FilterInfeasible { state: x.as_slice().to_vec(), h: cbf.h(x) }),
    }
}

pub fn safety_filter(sys: &dyn ControlAffineSystem, cbf: &Cbf, w: &DisturbanceSet, x: &Vector, u_nom: &Vector, u_set: &Polytope) -> Result<Vector> {
    safety_filter_detailed(sys, cbf, w, x, u_nom, u_set).map(|s| s.u)
}
