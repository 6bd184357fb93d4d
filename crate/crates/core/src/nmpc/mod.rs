//! Multiple-shooting NMPC solved by real-time iteration.
//!
//! Decision vector v = [x₀ … x_N, u₀ … u_{N−1}, s₁ … s_N]. The state constraint
//! h(x_k) ≥ 0 is softened with a nonnegative slack per stage, penalized by
//! ρ₁ s + ρ₂ s² (for s ≥ 0 this is exactly ‖s‖₁ + ‖s‖²). Each QP is condensed onto
//! [δU; S] by eliminating the linearized dynamics; the cost is a sum of squares, so its
//! Gauss-Newton Hessian is exact.

mod tube_loop;

pub use tube_loop::{run_algorithm2, Algorithm2Report, TubeRtiController, TubeRtiOutput};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{cbf_condition_affine, Cbf, ControlAffineSystem, Polytope};
use crate::opt::lqr::lqr_gain;
use crate::opt::qp::{solve_qp_with, QpOptions, QpProblem, QpStatus};

/// RK4 over one shooting interval, with forward sensitivities.
#[derive(Clone)]
pub struct Rk4Map {
    pub sys: Arc<dyn ControlAffineSystem>,
    pub t_s: f64,
    /// RK4 steps per shooting interval.
    pub steps: usize,
}

impl std::fmt::Debug for Rk4Map {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rk4Map").field("t_s", &self.t_s).field("steps", &self.steps).finish()
    }
}

pub fn discretize_rk4(sys: Arc<dyn ControlAffineSystem>, t_s: f64) -> Result<Rk4Map> {
    if !(t_s > 0.0) {
        return Err(Error::InvalidArgument("shooting interval must be positive".into()));
    }
    Ok(Rk4Map { sys, t_s, steps: 1 })
}

impl Rk4Map {
    fn velocity_jacobian(&self, x: &Vector, u: &Vector) -> Mat {
        let mut j = self.sys.drift_jacobian(x);
        for (col, db) in self.sys.input_matrix_jacobian(x).into_iter().enumerate() {
            let d = db * u;
            for i in 0..j.nrows() {
                j[(i, col)] += d[i];
            }
        }
        j
    }

    pub fn eval(&self, x: &Vector, u: &Vector) -> Vector {
        let h = self.t_s / self.steps as f64;
        let mut y = x.clone();
        for _ in 0..self.steps {
            let s = &*self.sys;
            let k1 = s.velocity(&y, u);
            let k2 = s.velocity(&(&y + &k1 * (h / 2.0)), u);
            let k3 = s.velocity(&(&y + &k2 * (h / 2.0)), u);
            let k4 = s.velocity(&(&y + &k3 * h), u);
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        y
    }

    /// (f_d(x, u), ∂f_d/∂x, ∂f_d/∂u) by the chain rule through the RK4 stages.
    pub fn eval_with_jacobians(&self, x: &Vector, u: &Vector) -> (Vector, Mat, Mat) {
        let n = x.len();
        let h = self.t_s / self.steps as f64;
        let eye = Mat::identity(n, n);
        let s = &*self.sys;
        let mut y = x.clone();
        let mut a_tot = eye.clone();
        let mut b_tot = Mat::zeros(n, u.len());
        for _ in 0..self.steps {
            let stage = |p: &Vector, px: &Mat, pu: &Mat| {
                let j = self.velocity_jacobian(p, u);
                (s.velocity(p, u), &j * px, &j * pu + s.input_matrix(p))
            };
            let (k1, k1x, k1u) = stage(&y, &eye, &Mat::zeros(n, u.len()));
            let (k2, k2x, k2u) = stage(&(&y + &k1 * (h / 2.0)), &(&eye + &k1x * (h / 2.0)), &(&k1u * (h / 2.0)));
            let (k3, k3x, k3u) = stage(&(&y + &k2 * (h / 2.0)), &(&eye + &k2x * (h / 2.0)), &(&k2u * (h / 2.0)));
            let (k4, k4x, k4u) = stage(&(&y + &k3 * h), &(&eye + &k3x * h), &(&k3u * h));
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let a = &eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
            let b = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (h / 6.0);
            b_tot = &a * b_tot + b;
            a_tot = a * a_tot;
        }
        (y, a_tot, b_tot)
    }
}

/// Stage cost ‖x − r‖²_Q + ‖u_k − u_{k−1}‖²_{R₁} + ‖u‖²_{R₂}, terminal ‖x_N − r‖²_P.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub dynamics: Rk4Map,
    pub horizon: usize,
    pub q: Mat,
    pub r_delta: Mat,
    pub r_input: Mat,
    pub terminal: Mat,
    /// K of the pre-stabilizing feedback δu = −K δx used for condensing (zero: plain condensing).
    pub prestabilizer: Mat,
    /// Hard input bounds on every stage (infinite entries are omitted).
    pub u_lo: Vector,
    pub u_hi: Vector,
    /// Softened h(x_k) ≥ 0 for k = 1..N.
    pub state_constraint: Option<Cbf>,
    pub slack_linear: f64,
    pub slack_quadratic: f64,
    pub reference: Vector,
}

impl NlpProblem {
    pub fn new(dynamics: Rk4Map, horizon: usize, q: Mat, r_delta: Mat, r_input: Mat) -> Result<Self> {
        let n = dynamics.sys.state_dim();
        let m = dynamics.sys.input_dim();
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if q.shape() != (n, n) || r_delta.shape() != (m, m) || r_input.shape() != (m, m) {
            return Err(Error::Dimension("cost weights do not match the system".into()));
        }
        for (name, w) in [("Q", &q), ("R1", &r_delta), ("R2", &r_input)] {
            if crate::linalg::min_sym_eigenvalue(w) < -1e-12 {
                return Err(Error::InvalidArgument(format!("weight {name} must be positive semidefinite")));
            }
        }
        if (&r_delta + &r_input).cholesky().is_none() {
            return Err(Error::InvalidArgument("R1 + R2 must be positive definite".into()));
        }
        Ok(Self {
            dynamics,
            horizon,
            terminal: q.clone(),
            prestabilizer: Mat::zeros(m, n),
            q,
            r_delta,
            r_input,
            u_lo: Vector::from_element(m, f64::NEG_INFINITY),
            u_hi: Vector::from_element(m, f64::INFINITY),
            state_constraint: None,
            slack_linear: 1e3,
            slack_quadratic: 1e4,
            reference: Vector::zeros(n),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.sys.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.sys.input_dim()
    }

    fn slack_count(&self) -> usize {
        if self.state_constraint.is_some() {
            self.horizon
        } else {
            0
        }
    }

    /// Terminal weight from the discrete Riccati equation of the linearization at
    /// (x_eq, u_eq), with R = R₂; its gain also becomes the condensing pre-stabilizer.
    pub fn with_dare_terminal(mut self, x_eq: &Vector, u_eq: &Vector) -> Result<Self> {
        let (_, a, b) = self.dynamics.eval_with_jacobians(x_eq, u_eq);
        let lqr = lqr_gain(&a, &b, &self.q, &self.r_input, true)?;
        self.terminal = lqr.p;
        self.prestabilizer = lqr.k;
        Ok(self)
    }

    pub fn with_input_bounds(mut self, lo: Vector, hi: Vector) -> Result<Self> {
        if lo.len() != self.input_dim() || hi.len() != self.input_dim() || lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("input bounds must satisfy lo ≤ hi".into()));
        }
        self.u_lo = lo;
        self.u_hi = hi;
        Ok(self)
    }

    pub fn with_state_constraint(mut self, cbf: Cbf, slack_linear: f64, slack_quadratic: f64) -> Self {
        self.state_constraint = Some(cbf);
        self.slack_linear = slack_linear;
        self.slack_quadratic = slack_quadratic;
        self
    }

    /// NLP objective at an iterate.
    pub fn cost(&self, s: &RtiState) -> f64 {
        let r = &self.reference;
        let mut j = 0.0;
        for k in 1..self.horizon {
            let e = &s.x[k] - r;
            j += e.dot(&(&self.q * &e));
        }
        let e = &s.x[self.horizon] - r;
        j += e.dot(&(&self.terminal * &e));
        for k in 0..self.horizon {
            let prev = if k == 0 { &s.u_prev } else { &s.u[k - 1] };
            let du = &s.u[k] - prev;
            j += du.dot(&(&self.r_delta * &du)) + s.u[k].dot(&(&self.r_input * &s.u[k]));
        }
        j + s.s.iter().map(|v| self.slack_linear * v + self.slack_quadratic * v * v).sum::<f64>()
    }
}

/// Primal-dual iterate of the NLP plus the input applied before stage 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RtiState {
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub s: Vector,
    /// Costates of the dynamics constraints (λ₀ for x₀ = x̂).
    pub lambda: Vec<Vector>,
    /// Multipliers of the softened state rows (≥ 0).
    pub mu: Vector,
    pub u_prev: Vector,
}

impl RtiState {
    pub fn constant(p: &NlpProblem, x: &Vector, u: &Vector) -> Self {
        let (n, nn) = (p.state_dim(), p.horizon);
        Self { x: vec![x.clone(); nn + 1], u: vec![u.clone(); nn], s: Vector::zeros(p.slack_count()), lambda: vec![Vector::zeros(n); nn + 1], mu: Vector::zeros(p.slack_count()), u_prev: u.clone() }
    }

    /// v = [X; U; S].
    pub fn stack(&self) -> Vector {
        let parts: Vec<f64> = self.x.iter().chain(self.u.iter()).flat_map(|v| v.iter().copied()).chain(self.s.iter().copied()).collect();
        Vector::from_vec(parts)
    }

    pub fn unstack(p: &NlpProblem, v: &Vector, template: &RtiState) -> Result<Self> {
        let (n, m, nn, ns) = (p.state_dim(), p.input_dim(), p.horizon, p.slack_count());
        if v.len() != (nn + 1) * n + nn * m + ns {
            return Err(Error::Dimension(format!("decision vector has {} entries", v.len())));
        }
        let mut out = template.clone();
        out.x = (0..=nn).map(|k| v.rows(k * n, n).into_owned()).collect();
        out.u = (0..nn).map(|k| v.rows((nn + 1) * n + k * m, m).into_owned()).collect();
        out.s = v.rows((nn + 1) * n + nn * m, ns).into_owned();
        Ok(out)
    }
}

/// Ξ_{x₀}: first state block of v.
pub fn xi_x0(p: &NlpProblem, v: &Vector) -> Vector {
    v.rows(0, p.state_dim()).into_owned()
}

/// Ξ_{u₀}: first input block of v.
pub fn xi_u0(p: &NlpProblem, v: &Vector) -> Vector {
    v.rows((p.horizon + 1) * p.state_dim(), p.input_dim()).into_owned()
}

/// Extra rows a·u₀ ≤ b that are never softened.
#[derive(Debug, Clone)]
pub struct HardRows {
    pub a: Mat,
    pub b: Vector,
}

/// The condensed QP over z = [W; S] plus what is needed to expand its solution.
///
/// Inputs are parametrized around the pre-stabilizing feedback, δu_k = −K δx_k + w_k,
/// so the sensitivities of an open-loop unstable plant stay bounded over long horizons.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    /// δx_k = G_k W + e_k, k = 0..N.
    pub g: Vec<Mat>,
    pub e: Vec<Vector>,
    /// δu_k = D_k W + d_k, k = 0..N−1.
    pub du: Vec<Mat>,
    pub du0: Vec<Vector>,
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    /// First inequality row of each block: input bounds, soft rows, slack signs, hard rows.
    pub soft_rows: std::ops::Range<usize>,
    pub hard_rows: std::ops::Range<usize>,
    pub start: Vector,
}

/// Linearizes at the iterate (with x₀ replaced by x̂) and condenses.
pub fn build_rti_qp(p: &NlpProblem, s: &RtiState, x_hat: &Vector, hard: Option<&HardRows>) -> Result<CondensedQp> {
    let (n, m, nn, ns) = (p.state_dim(), p.input_dim(), p.horizon, p.slack_count());
    if x_hat.len() != n || s.x.len() != nn + 1 || s.u.len() != nn || s.s.len() != ns {
        return Err(Error::Dimension("iterate does not match the problem".into()));
    }
    let nu = nn * m;
    let dz = nu + ns;
    let kfb = &p.prestabilizer;
    let mut a_list = Vec::with_capacity(nn);
    let mut b_list = Vec::with_capacity(nn);
    let mut gk = vec![Mat::zeros(n, nu)];
    let mut ek = vec![x_hat - &s.x[0]];
    let mut dk = Vec::with_capacity(nn);
    let mut d0k = Vec::with_capacity(nn);
    // W that keeps δu = 0 on every stage, used as the QP start
    let mut w_start = Vector::zeros(dz);
    let mut dx_open = ek[0].clone();
    for k in 0..nn {
        let (xn, a, b) = p.dynamics.eval_with_jacobians(&s.x[k], &s.u[k]);
        if !crate::linalg::all_finite(xn.as_slice()) || !crate::linalg::all_finite(a.as_slice()) {
            return Err(Error::NonFinite { component: "discrete dynamics", state: s.x[k].as_slice().to_vec() });
        }
        let mut d = -(kfb * &gk[k]);
        for j in 0..m {
            d[(j, k * m + j)] += 1.0;
        }
        let d0 = -(kfb * &ek[k]);
        let defect = xn - &s.x[k + 1];
        w_start.rows_mut(k * m, m).copy_from(&(kfb * &dx_open));
        dx_open = &a * &dx_open + &defect;
        gk.push(&a * &gk[k] + &b * &d);
        ek.push(&a * &ek[k] + &b * &d0 + defect);
        dk.push(d);
        d0k.push(d0);
        a_list.push(a);
        b_list.push(b);
    }

    let mut h = Mat::zeros(dz, dz);
    let mut g = Vector::zeros(dz);
    for k in 1..=nn {
        let w = if k == nn { &p.terminal } else { &p.q };
        let y = &s.x[k] + &ek[k] - &p.reference;
        let gw = gk[k].transpose() * w;
        h.view_mut((0, 0), (nu, nu)).add_assign(&(&gw * &gk[k] * 2.0));
        g.rows_mut(0, nu).add_assign(&(&gw * y * 2.0));
    }
    for k in 0..nn {
        let dr = dk[k].transpose() * &p.r_input;
        h.view_mut((0, 0), (nu, nu)).add_assign(&(&dr * &dk[k] * 2.0));
        g.rows_mut(0, nu).add_assign(&(&dr * (&s.u[k] + &d0k[k]) * 2.0));
        let (dd, y) = if k == 0 { (dk[0].clone(), &s.u[0] - &s.u_prev + &d0k[0]) } else { (&dk[k] - &dk[k - 1], &s.u[k] - &s.u[k - 1] + &d0k[k] - &d0k[k - 1]) };
        let ddr = dd.transpose() * &p.r_delta;
        h.view_mut((0, 0), (nu, nu)).add_assign(&(&ddr * &dd * 2.0));
        g.rows_mut(0, nu).add_assign(&(&ddr * y * 2.0));
    }
    for k in 0..ns {
        h[(nu + k, nu + k)] = 2.0 * p.slack_quadratic;
        g[nu + k] = p.slack_linear;
    }

    let mut rows: Vec<(Vector, f64)> = Vec::new();
    for k in 0..nn {
        for j in 0..m {
            let mut r = Vector::zeros(dz);
            r.rows_mut(0, nu).copy_from(&dk[k].row(j).transpose());
            let base = s.u[k][j] + d0k[k][j];
            if p.u_hi[j].is_finite() {
                rows.push((r.clone(), p.u_hi[j] - base));
            }
            if p.u_lo[j].is_finite() {
                rows.push((-r, base - p.u_lo[j]));
            }
        }
    }
    let soft_start = rows.len();
    let mut start = w_start;
    if let Some(cbf) = &p.state_constraint {
        // −h(x_k) − ∇hᵀ δx_k ≤ s_k
        for k in 1..=nn {
            let gh = cbf.grad_h(&s.x[k]);
            let hk = cbf.h(&s.x[k]);
            let mut r = Vector::zeros(dz);
            let gr = -(gk[k].transpose() * &gh);
            r.rows_mut(0, nu).copy_from(&gr);
            r[nu + k - 1] = -1.0;
            let rhs = hk + gh.dot(&ek[k]);
            start[nu + k - 1] = (gr.dot(&start.rows(0, nu)) - rhs).max(0.0);
            rows.push((r, rhs));
        }
        for k in 0..ns {
            let mut r = Vector::zeros(dz);
            r[nu + k] = -1.0;
            rows.push((r, 0.0));
        }
    }
    let soft_end = soft_start + ns;
    let hard_start = rows.len();
    if let Some(hr) = hard {
        if hr.a.ncols() != m || hr.a.nrows() != hr.b.len() {
            return Err(Error::Dimension("hard rows must act on u₀".into()));
        }
        for i in 0..hr.a.nrows() {
            let ai = hr.a.row(i).transpose();
            let mut r = Vector::zeros(dz);
            r.rows_mut(0, nu).copy_from(&(dk[0].transpose() * &ai));
            rows.push((r, hr.b[i] - ai.dot(&(&s.u[0] + &d0k[0]))));
        }
    }
    let hard_end = rows.len();
    let mut a_in = Mat::zeros(rows.len(), dz);
    let mut b_in = Vector::zeros(rows.len());
    for (i, (r, b)) in rows.into_iter().enumerate() {
        a_in.row_mut(i).copy_from(&r.transpose());
        b_in[i] = b;
    }
    let qp = QpProblem::new(h, g).with_inequalities(a_in, b_in);
    Ok(CondensedQp { qp, g: gk, e: ek, du: dk, du0: d0k, a: a_list, b: b_list, soft_rows: soft_start..soft_end, hard_rows: hard_start..hard_end, start })
}

#[derive(Debug, Clone)]
pub struct RtiReport {
    pub qp_iterations: usize,
    /// ‖δv‖∞ of the step just taken.
    pub step_norm: f64,
    pub slack_norm: f64,
    /// Multipliers of the hard rows (empty without them).
    pub hard_multipliers: Vector,
    pub hard_active: bool,
}

/// One full Gauss-Newton SQP step from the iterate (no shift).
pub fn rti_iterate(p: &NlpProblem, s: &RtiState, x_hat: &Vector, hard: Option<&HardRows>) -> Result<(RtiState, RtiReport)> {
    let (n, m, nn) = (p.state_dim(), p.input_dim(), p.horizon);
    let mut base = s.clone();
    // anchoring x₀ at the measurement makes the first-stage rows exact
    base.x[0] = x_hat.clone();
    let cq = build_rti_qp(p, &base, x_hat, hard)?;
    let nu = nn * m;
    let opts = QpOptions { start: Some(cq.start.clone()), ..QpOptions::default() };
    let sol = solve_qp_with(&cq.qp, &opts)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible if !cq.hard_rows.is_empty() => {
            return Err(Error::HardRowInfeasible(format!("no u₀ satisfies the hard rows at x̂ = {:?}", x_hat.as_slice())));
        }
        QpStatus::Infeasible => return Err(Error::QpInfeasible("RTI subproblem".into())),
        QpStatus::Unbounded => return Err(Error::QpUnbounded),
    }
    let w = sol.z.rows(0, nu).into_owned();
    let mut next = base.clone();
    let mut step_norm: f64 = 0.0;
    for k in 0..=nn {
        let dx = &cq.g[k] * &w + &cq.e[k];
        step_norm = step_norm.max(dx.amax());
        next.x[k] = &base.x[k] + dx;
    }
    next.x[0] = x_hat.clone();
    for k in 0..nn {
        let d = &cq.du[k] * &w + &cq.du0[k];
        step_norm = step_norm.max(d.amax());
        next.u[k] = &base.u[k] + d;
    }
    let s_new = sol.z.rows(nu, p.slack_count()).into_owned();
    step_norm = step_norm.max((&s_new - &base.s).amax());
    next.s = s_new;
    next.mu = sol.in_multipliers.rows(cq.soft_rows.start, cq.soft_rows.len()).into_owned();
    // costates: λ_N = ∇_x l_N + ∇g_N μ_N, λ_k = ∇_x l_k + A_kᵀ λ_{k+1} + ∇g_k μ_k
    let grad_g = |k: usize| -> Vector {
        match &p.state_constraint {
            Some(c) if k >= 1 => -c.grad_h(&next.x[k]) * next.mu[k - 1],
            _ => Vector::zeros(n),
        }
    };
    let mut lambda = vec![Vector::zeros(n); nn + 1];
    lambda[nn] = &p.terminal * (&next.x[nn] - &p.reference) * 2.0 + grad_g(nn);
    for k in (0..nn).rev() {
        let stage = if k == 0 { Vector::zeros(n) } else { &p.q * (&next.x[k] - &p.reference) * 2.0 };
        lambda[k] = stage + cq.a[k].transpose() * &lambda[k + 1] + grad_g(k);
    }
    next.lambda = lambda;
    let hard_multipliers = sol.in_multipliers.rows(cq.hard_rows.start, cq.hard_rows.len()).into_owned();
    let hard_active = cq.hard_rows.clone().any(|i| sol.active.contains(&i));
    let report = RtiReport { qp_iterations: sol.iterations, step_norm, slack_norm: next.s.amax(), hard_multipliers, hard_active };
    Ok((next, report))
}

/// Warm start for the next sampling instant, `period` seconds later: states are
/// interpolated along the shooting grid, inputs and slacks held, and the tail is padded
/// with the terminal stage. With period = T_s this drops stage 0 and duplicates the last.
pub fn shift(p: &NlpProblem, s: &RtiState, period: f64, applied: &Vector) -> RtiState {
    let nn = p.horizon;
    let phi = period / p.dynamics.t_s;
    let interp = |seq: &[Vector], t: f64| -> Vector {
        let last = seq.len() - 1;
        if t >= last as f64 {
            return seq[last].clone();
        }
        let i = t.floor() as usize;
        let f = t - i as f64;
        if f < 1e-12 {
            seq[i].clone()
        } else {
            &seq[i] * (1.0 - f) + &seq[i + 1] * f
        }
    };
    let hold = |seq: &[Vector], t: f64| -> Vector {
        let i = ((t + 1e-9).floor() as usize).min(seq.len() - 1);
        seq[i].clone()
    };
    let mut out = s.clone();
    out.x = (0..=nn).map(|k| interp(&s.x, k as f64 + phi)).collect();
    out.lambda = (0..=nn).map(|k| interp(&s.lambda, k as f64 + phi)).collect();
    out.u = (0..nn).map(|k| hold(&s.u, k as f64 + phi)).collect();
    let sv: Vec<Vector> = s.s.iter().map(|&v| Vector::from_element(1, v)).collect();
    if !sv.is_empty() {
        out.s = Vector::from_iterator(sv.len(), (0..sv.len()).map(|k| hold(&sv, k as f64 + phi)[0]));
        let mv: Vec<Vector> = s.mu.iter().map(|&v| Vector::from_element(1, v)).collect();
        out.mu = Vector::from_iterator(mv.len(), (0..mv.len()).map(|k| hold(&mv, k as f64 + phi)[0]));
    }
    out.u_prev = applied.clone();
    out
}

/// One RTI feedback step: a single QP at x̂, full step, then the shift for the next
/// instant. Returns u₀ of the updated (pre-shift) iterate.
pub fn rti_step(p: &NlpProblem, s: &RtiState, x_hat: &Vector, period: f64) -> Result<(Vector, RtiState, RtiReport)> {
    let (next, report) = rti_iterate(p, s, x_hat, None)?;
    let u0 = next.u[0].clone();
    Ok((u0.clone(), shift(p, &next, period, &u0), report))
}

/// Hard rows for the CBF-augmented step: CBF′(x̂, u₀) ≥ 0 and u₀ ∈ U′.
pub fn cbf_hard_rows(p: &NlpProblem, cbf_prime: &Cbf, x_hat: &Vector, u_tight: &Polytope) -> Result<HardRows> {
    let m = p.input_dim();
    let (c, d) = cbf_condition_affine(&*p.dynamics.sys, cbf_prime, x_hat)?;
    let rows = 1 + u_tight.a.nrows();
    let mut a = Mat::zeros(rows, m);
    let mut b = Vector::zeros(rows);
    a.row_mut(0).copy_from(&(-c.transpose()));
    b[0] = d;
    a.view_mut((1, 0), (u_tight.a.nrows(), m)).copy_from(&u_tight.a);
    b.rows_mut(1, u_tight.b.len()).copy_from(&u_tight.b);
    Ok(HardRows { a, b })
}

/// RTI step with the affine CBF condition at x̂ and u₀ ∈ U′ as hard rows.
pub fn cbf_rti_step(p: &NlpProblem, s: &RtiState, x_hat: &Vector, cbf_prime: &Cbf, u_tight: &Polytope, period: f64) -> Result<(Vector, RtiState, RtiReport)> {
    let hard = cbf_hard_rows(p, cbf_prime, x_hat, u_tight)?;
    let (mut next, report) = rti_iterate(p, s, x_hat, Some(&hard))?;
    // the QP meets U′ to solver tolerance; snap the last ulps so u₀ ∈ U′ holds exactly
    next.u[0] = crate::tube::clip_to(&next.u[0], u_tight);
    let u0 = next.u[0].clone();
    Ok((u0.clone(), shift(p, &next, period, &u0), report))
}

#[derive(Debug, Clone)]
pub struct SqpReport {
    pub iterations: usize,
    pub step_norm: f64,
    pub converged: bool,
    pub qp_iterations: usize,
}

/// Converged Gauss-Newton SQP (the step norm is the stationarity measure).
pub fn full_nmpc_solve(p: &NlpProblem, s: &RtiState, x_hat: &Vector, max_iters: usize, tol: f64) -> Result<(Vector, RtiState, SqpReport)> {
    let mut cur = s.clone();
    let mut report = SqpReport { iterations: 0, step_norm: f64::INFINITY, converged: false, qp_iterations: 0 };
    for it in 1..=max_iters {
        let (next, r) = rti_iterate(p, &cur, x_hat, None)?;
        cur = next;
        report.iterations = it;
        report.step_norm = r.step_norm;
        report.qp_iterations += r.qp_iterations;
        if r.step_norm <= tol {
            report.converged = true;
            break;
        }
    }
    Ok((cur.u[0].clone(), cur, report))
}

trait AddAssignExt<R> {
    fn add_assign(&mut self, rhs: &R);
}

impl<'a, R: nalgebra::Dim, C: nalgebra::Dim, RS: nalgebra::Dim, CS: nalgebra::Dim, S> AddAssignExt<nalgebra::Matrix<f64, R, C, S>>
    for nalgebra::Matrix<f64, R, C, nalgebra::ViewStorageMut<'a, f64, R, C, RS, CS>>
where
    S: nalgebra::Storage<f64, R, C>,
{
    fn add_assign(&mut self, rhs: &nalgebra::Matrix<f64, R, C, S>) {
        *self += rhs;
    }
}

#[cfg(test)]
mod tests;
