//! Inter-sample drift budgets and the disturbance boxes derived from them.
//!
//! Along any admissible trajectory |dφ_i/dt| ≤ Σ_j max|∂φ_i/∂x_j|·max|ẋ_j|, so over one
//! sampling period φ moves by at most L̃·T per component. The maxima are taken over a
//! grid on X crossed with the vertices of U and then inflated; this is an empirical bound
//! that the drift-soundness tests check against fine-step rollouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{Cbf, ControlAffineSystem, Hyperrectangle, Polytope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetVariant {
    /// Per-coordinate gradient and velocity bounds (default, less conservative).
    #[default]
    Componentwise,
    /// Euclidean gradient norm times Euclidean speed.
    Scalar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub grid_per_dim: usize,
    pub inflation: f64,
    pub variant: BudgetVariant,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self { grid_per_dim: 11, inflation: 1.1, variant: BudgetVariant::Componentwise }
    }
}

/// L̃ = L_φ·v_max. Componentwise: L_φ is outputs×n and v_max per state coordinate;
/// scalar: L_φ is outputs×1 and v_max has a single entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzBudget {
    pub l_phi: Mat,
    pub v_max: Vector,
    pub l_tilde: Vector,
}

impl LipschitzBudget {
    pub fn new(l_phi: Mat, v_max: Vector) -> Result<Self> {
        if l_phi.ncols() != v_max.len() {
            return Err(Error::Dimension(format!("L_phi has {} columns, v_max has {} entries", l_phi.ncols(), v_max.len())));
        }
        if l_phi.iter().chain(v_max.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("budgets must be finite and nonnegative".into()));
        }
        let l_tilde = &l_phi * &v_max;
        Ok(Self { l_phi, v_max, l_tilde })
    }

    pub fn zero(outputs: usize, cols: usize) -> Self {
        Self { l_phi: Mat::zeros(outputs, cols), v_max: Vector::zeros(cols), l_tilde: Vector::zeros(outputs) }
    }
}

/// Budgets for every map the robust barrier condition depends on.
#[derive(Debug, Clone)]
pub struct Budgets {
    pub f: LipschitzBudget,
    /// Over vec(B), column-major.
    pub b: LipschitzBudget,
    pub h: LipschitzBudget,
    pub grad_h: LipschitzBudget,
}

/// One disturbance sample w = (w_f, w_B, w_h, w_∇h).
#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub w_f: Vector,
    pub w_b: Mat,
    pub w_h: f64,
    pub w_grad_h: Vector,
}

impl Disturbance {
    pub fn zero(n: usize, m: usize) -> Self {
        Self { w_f: Vector::zeros(n), w_b: Mat::zeros(n, m), w_h: 0.0, w_grad_h: Vector::zeros(n) }
    }
}

/// W = W_f × W_B × W_h × W_∇h, every factor a box centred at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSet {
    pub n: usize,
    pub m: usize,
    pub w_f: Hyperrectangle,
    /// vec(B) ordering (column-major).
    pub w_b: Hyperrectangle,
    pub w_h: Hyperrectangle,
    pub w_grad_h: Hyperrectangle,
}

impl DisturbanceSet {
    pub fn zero(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            w_f: Hyperrectangle::point(Vector::zeros(n)),
            w_b: Hyperrectangle::point(Vector::zeros(n * m)),
            w_h: Hyperrectangle::point(Vector::zeros(1)),
            w_grad_h: Hyperrectangle::point(Vector::zeros(n)),
        }
    }

    /// Boxes from half-widths (all must be ≥ 0).
    pub fn from_half_widths(n: usize, m: usize, f: &[f64], b: &[f64], h: f64, grad_h: &[f64]) -> Result<Self> {
        if f.len() != n || b.len() != n * m || grad_h.len() != n {
            return Err(Error::Dimension("disturbance half-widths do not match (n, m)".into()));
        }
        let bx = |v: &[f64]| -> Result<Hyperrectangle> {
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidArgument("disturbance half-widths must be finite and nonnegative".into()));
            }
            Ok(Hyperrectangle::symmetric(Vector::from_column_slice(v)))
        };
        Ok(Self { n, m, w_f: bx(f)?, w_b: bx(b)?, w_h: bx(&[h])?, w_grad_h: bx(grad_h)? })
    }

    pub fn contains(&self, w: &Disturbance) -> bool {
        self.w_f.contains(&w.w_f) && self.w_b.contains(&Vector::from_column_slice(w.w_b.as_slice())) && self.w_h.contains(&Vector::from_element(1, w.w_h)) && self.w_grad_h.contains(&w.w_grad_h)
    }

    /// Number of corners of the full product box.
    pub fn vertex_count(&self) -> u128 {
        let d = self.n + self.n * self.m + 1 + self.n;
        1u128.checked_shl(d as u32).unwrap_or(u128::MAX)
    }
}

fn grid_and_vertices(sys: &dyn ControlAffineSystem, x_box: &Hyperrectangle, u: &Polytope, grid_per_dim: usize) -> Result<(Vec<Vector>, Vec<Vector>)> {
    if grid_per_dim < 2 {
        return Err(Error::InvalidArgument("grid_per_dim must be at least 2".into()));
    }
    if x_box.dim() != sys.state_dim() || u.dim() != sys.input_dim() {
        return Err(Error::Dimension("state box / input set do not match the system".into()));
    }
    if !u.is_bounded()? {
        return Err(Error::Unbounded("the input set must be bounded for a velocity bound".into()));
    }
    Ok((x_box.grid(grid_per_dim), u.vertices()?))
}

fn finite_or(v: &[f64], component: &'static str, x: &Vector) -> Result<()> {
    if linalg::all_finite(v) {
        Ok(())
    } else {
        Err(Error::NonFinite { component, state: x.as_slice().to_vec() })
    }
}

/// max ‖f(x) + B(x)u‖₂ over grid(X) × vert(U), times `inflation`.
pub fn estimate_velocity_bound(sys: &dyn ControlAffineSystem, x_box: &Hyperrectangle, u: &Polytope, grid_per_dim: usize, inflation: f64) -> Result<f64> {
    let (grid, verts) = grid_and_vertices(sys, x_box, u, grid_per_dim)?;
    let mut best = 0.0_f64;
    for x in &grid {
        let f = sys.drift(x);
        finite_or(f.as_slice(), "f", x)?;
        let b = sys.input_matrix(x);
        finite_or(b.as_slice(), "B", x)?;
        for v in &verts {
            best = best.max((&f + &b * v).norm());
        }
    }
    Ok(best * inflation)
}

/// Per-coordinate max |ẋ_j| over grid(X) × vert(U), times `inflation`.
pub fn estimate_velocity_components(sys: &dyn ControlAffineSystem, x_box: &Hyperrectangle, u: &Polytope, grid_per_dim: usize, inflation: f64) -> Result<Vector> {
    let (grid, verts) = grid_and_vertices(sys, x_box, u, grid_per_dim)?;
    let mut best = Vector::zeros(sys.state_dim());
    for x in &grid {
        let f = sys.drift(x);
        finite_or(f.as_slice(), "f", x)?;
        let b = sys.input_matrix(x);
        finite_or(b.as_slice(), "B", x)?;
        for v in &verts {
            let xd = &f + &b * v;
            for j in 0..best.len() {
                best[j] = best[j].max(xd[j].abs());
            }
        }
    }
    Ok(best * inflation)
}

/// Gradient bound of a map φ: X → R^p from its Jacobian.
///
/// Componentwise: p×n matrix of max |∂φ_i/∂x_j|. Scalar: p×1 column of max ‖∇φ_i‖₂.
pub fn estimate_gradient_bound(jacobian: &dyn Fn(&Vector) -> Mat, x_box: &Hyperrectangle, grid_per_dim: usize, inflation: f64, variant: BudgetVariant) -> Result<Mat> {
    if grid_per_dim < 2 {
        return Err(Error::InvalidArgument("grid_per_dim must be at least 2".into()));
    }
    let mut out: Option<Mat> = None;
    for x in x_box.grid(grid_per_dim) {
        let j = jacobian(&x);
        finite_or(j.as_slice(), "gradient", &x)?;
        let cur = match variant {
            BudgetVariant::Componentwise => j.map(f64::abs),
            BudgetVariant::Scalar => Mat::from_fn(j.nrows(), 1, |i, _| j.row(i).norm()),
        };
        out = Some(match out {
            None => cur,
            Some(o) => o.zip_map(&cur, f64::max),
        });
    }
    Ok(out.expect("grid is nonempty") * inflation)
}

/// Budgets for f, vec(B), h and ∇h over X × U.
pub fn compute_budgets(sys: &dyn ControlAffineSystem, cbf: &Cbf, x_box: &Hyperrectangle, u: &Polytope, cfg: &BoundsConfig) -> Result<Budgets> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let v_max = match cfg.variant {
        BudgetVariant::Componentwise => estimate_velocity_components(sys, x_box, u, cfg.grid_per_dim, cfg.inflation)?,
        BudgetVariant::Scalar => Vector::from_element(1, estimate_velocity_bound(sys, x_box, u, cfg.grid_per_dim, cfg.inflation)?),
    };
    let grad = |jac: &dyn Fn(&Vector) -> Mat| estimate_gradient_bound(jac, x_box, cfg.grid_per_dim, cfg.inflation, cfg.variant);
    let lf = grad(&|x| sys.drift_jacobian(x))?;
    let lb = grad(&|x| {
        let parts = sys.input_matrix_jacobian(x);
        Mat::from_fn(n * m, n, |r, j| parts[j].as_slice()[r])
    })?;
    let lh = grad(&|x| Mat::from_row_slice(1, n, cbf.grad_h(x).as_slice()))?;
    let lgh = grad(&|x| cbf.barrier.hessian(x))?;
    Ok(Budgets { f: LipschitzBudget::new(lf, v_max.clone())?, b: LipschitzBudget::new(lb, v_max.clone())?, h: LipschitzBudget::new(lh, v_max.clone())?, grad_h: LipschitzBudget::new(lgh, v_max)? })
}

/// Boxes of half-width L̃·T around the origin.
pub fn build_disturbance_set(budgets: &Budgets, n: usize, m: usize, period: f64) -> Result<DisturbanceSet> {
    if !(period > 0.0) || !period.is_finite() {
        return Err(Error::InvalidArgument("sampling period must be positive".into()));
    }
    let hw = |b: &LipschitzBudget| -> Vec<f64> { (&b.l_tilde * period).as_slice().to_vec() };
    DisturbanceSet::from_half_widths(n, m, &hw(&budgets.f), &hw(&budgets.b), hw(&budgets.h)[0], &hw(&budgets.grad_h))
}
