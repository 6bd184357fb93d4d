//! Primal active-set solver for dense convex QPs
//!
//! ```text
//! min ½ zᵀHz + gᵀz   s.t.  A_eq z = b_eq,  A_in z ≤ b_in
//! ```
//!
//! A feasible start comes from the caller (warm start), from the equality-constrained
//! minimizer when it happens to be feasible, or from a phase-1 LP. Each iteration
//! solves the KKT system of the working set with a dense LU. The most negative
//! multiplier leaves the working set until a streak of zero-length steps appears;
//! from then on Bland's smallest-index rule is used for both leaving and blocking
//! constraints, which rules out cycling.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::opt::lp::{solve_lp, LpProblem, LpStatus, Sense};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: Mat,
    pub g: Vector,
    pub a_eq: Mat,
    pub b_eq: Vector,
    pub a_in: Mat,
    pub b_in: Vector,
}

impl QpProblem {
    pub fn new(h: Mat, g: Vector) -> Self {
        let d = g.len();
        Self { h, g, a_eq: Mat::zeros(0, d), b_eq: Vector::zeros(0), a_in: Mat::zeros(0, d), b_in: Vector::zeros(0) }
    }

    pub fn with_equalities(mut self, a: Mat, b: Vector) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: Mat, b: Vector) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    /// Largest violation of any constraint at `z` (0 when feasible).
    pub fn max_violation(&self, z: &Vector) -> f64 {
        let eq = (&self.a_eq * z - &self.b_eq).amax();
        let ineq = (&self.a_in * z - &self.b_in).iter().fold(0.0_f64, |m, v| m.max(*v));
        eq.max(ineq)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.h.nrows() != d || self.h.ncols() != d {
            return Err(Error::Dimension(format!("H is {}×{} but g has length {d}", self.h.nrows(), self.h.ncols())));
        }
        if self.a_eq.ncols() != d || self.a_in.ncols() != d || self.a_eq.nrows() != self.b_eq.len() || self.a_in.nrows() != self.b_in.len() {
            return Err(Error::Dimension("QP constraint blocks are inconsistent with the variable count".into()));
        }
        if !linalg::is_symmetric(&self.h, 1e-10) {
            return Err(Error::InvalidArgument("H is not symmetric".into()));
        }
        let finite = [self.h.as_slice(), self.g.as_slice(), self.a_eq.as_slice(), self.b_eq.as_slice(), self.a_in.as_slice(), self.b_in.as_slice()];
        if !finite.iter().all(|s| linalg::all_finite(s)) {
            return Err(Error::InvalidArgument("QP data contains non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub z: Vector,
    /// Multipliers ν with Hz + g + A_eqᵀν + A_inᵀμ = 0.
    pub eq_multipliers: Vector,
    /// μ ≥ 0, zero for inactive rows.
    pub in_multipliers: Vector,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    /// Defaults to 50·d (at least 100).
    pub max_iterations: Option<usize>,
    pub feasibility_tol: f64,
    pub regularization: f64,
    /// Feasible starting point; ignored when it violates the constraints.
    pub start: Option<Vector>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { max_iterations: None, feasibility_tol: 1e-9, regularization: 1e-9, start: None }
    }
}

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    solve_qp_with(p, &QpOptions::default())
}

fn no_solution(p: &QpProblem, status: QpStatus) -> QpSolution {
    QpSolution {
        status,
        z: Vector::zeros(p.dim()),
        eq_multipliers: Vector::zeros(p.a_eq.nrows()),
        in_multipliers: Vector::zeros(p.a_in.nrows()),
        active: Vec::new(),
        iterations: 0,
        objective: f64::NAN,
        kkt_residual: f64::NAN,
    }
}

pub fn solve_qp_with(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    p.validate()?;
    let d = p.dim();
    let me = p.a_eq.nrows();
    let mi = p.a_in.nrows();
    let hscale = p.h.amax().max(1.0);
    let mut h = linalg::symmetrize(&p.h);
    if h.clone().cholesky().is_none() {
        for i in 0..d {
            h[(i, i)] += opts.regularization * hscale;
        }
    }
    let data_scale = 1.0 + p.b_eq.amax().max(p.b_in.amax());
    let ftol = opts.feasibility_tol * data_scale;
    let cap = opts.max_iterations.unwrap_or((50 * d).max(100));

    let in_rows: Vec<Vector> = (0..mi).map(|i| p.a_in.row(i).transpose()).collect();
    let eq_rows: Vec<Vector> = (0..me).map(|i| p.a_eq.row(i).transpose()).collect();
    let eq_keep = linalg::independent_rows(&eq_rows, 1e-10);

    let mut z = match starting_point(p, &h, &eq_keep, opts, ftol)? {
        Some(z) => z,
        None => return Ok(no_solution(p, QpStatus::Infeasible)),
    };

    // working set: independent equalities, then active inequalities that keep it independent
    let mut work: Vec<usize> = Vec::new();
    {
        let mut basis = linalg::RowBasis::default();
        for &i in &eq_keep {
            basis.try_add(&eq_rows[i], 1e-9);
        }
        for i in (0..mi).filter(|&i| (in_rows[i].dot(&z) - p.b_in[i]).abs() <= ftol) {
            if basis.len() < d && basis.try_add(&in_rows[i], 1e-9) {
                work.push(i);
            }
        }
    }

    let mut iterations = 0;
    let mut bland = false;
    let mut zero_steps = 0usize;
    // after an unblocked full step z minimizes over the working set; what the next KKT
    // solve returns as a step is rounding noise
    let mut at_minimizer = false;
    loop {
        iterations += 1;
        if iterations > cap {
            let grad = &h * &z + &p.g;
            return Err(Error::NonConvergence { solver: "active-set QP", iterations: cap, residual: grad.amax() });
        }
        let (step, mult) = kkt_step(&h, &p.g, &z, &eq_keep, &eq_rows, &work, &in_rows)?;
        let zscale = 1.0 + z.amax();
        if at_minimizer || step.amax() <= 1e-12 * zscale {
            at_minimizer = false;
            // stationary on the working set: check the inequality multipliers
            let mut leave: Option<(usize, f64)> = None;
            for (k, &i) in work.iter().enumerate() {
                let mu = mult[eq_keep.len() + k];
                if mu < -1e-10 * (1.0 + p.g.amax()) {
                    let pick = match leave {
                        None => true,
                        Some((kk, best)) => {
                            if bland {
                                i < work[kk]
                            } else {
                                mu < best
                            }
                        }
                    };
                    if pick {
                        leave = Some((k, mu));
                    }
                }
            }
            match leave {
                None => return finish(p, &h, z, &eq_keep, &work, &mult, iterations),
                Some((k, _)) => {
                    work.remove(k);
                    continue;
                }
            }
        }
        // ratio test against inactive inequalities
        let mut alpha = 1.0;
        let mut block: Option<usize> = None;
        for i in 0..mi {
            if work.contains(&i) {
                continue;
            }
            let ap = in_rows[i].dot(&step);
            if ap > 1e-14 * (1.0 + in_rows[i].amax()) * (1.0 + step.amax()) {
                let slack = (p.b_in[i] - in_rows[i].dot(&z)).max(0.0);
                let t = slack / ap;
                let better = match block {
                    None => t < alpha,
                    Some(b) => t < alpha - 1e-15 || (t <= alpha + 1e-15 && bland && i < b),
                };
                if better {
                    alpha = t.min(alpha);
                    block = Some(i);
                }
            }
        }
        if block.is_none() && step.amax() > 1e12 * zscale {
            return Ok(no_solution(p, QpStatus::Unbounded));
        }
        z += &step * alpha;
        if alpha <= 1e-14 {
            zero_steps += 1;
            if zero_steps > 3 {
                bland = true;
            }
        } else {
            zero_steps = 0;
        }
        match block {
            Some(i) => work.push(i),
            None => at_minimizer = true,
        }
    }
}

/// Solves the working-set KKT system; returns the step and the multipliers at z + step.
///
/// Working rows with a single nonzero (bounds) pin their variable, so the dense solve
/// only covers the free variables and the general rows.
fn kkt_step(h: &Mat, g: &Vector, z: &Vector, eq_keep: &[usize], eq_rows: &[Vector], work: &[usize], in_rows: &[Vector]) -> Result<(Vector, Vector)> {
    let d = z.len();
    let rows: Vec<&Vector> = eq_keep.iter().map(|&i| &eq_rows[i]).chain(work.iter().map(|&i| &in_rows[i])).collect();
    let is_eq = |r: usize| r < eq_keep.len();
    let mut pinned: Vec<Option<usize>> = vec![None; d];
    let mut general = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let mut nz = row.iter().enumerate().filter(|(_, v)| **v != 0.0);
        match (nz.next(), nz.next()) {
            (Some((j, _)), None) if !is_eq(r) && pinned[j].is_none() => pinned[j] = Some(r),
            _ => general.push(r),
        }
    }
    let free: Vec<usize> = (0..d).filter(|&j| pinned[j].is_none()).collect();
    let (nf, ng) = (free.len(), general.len());
    let grad = h * z + g;
    let mut k = Mat::zeros(nf + ng, nf + ng);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            k[(a, b)] = h[(i, j)];
        }
    }
    for (r, &gr) in general.iter().enumerate() {
        for (a, &j) in free.iter().enumerate() {
            k[(nf + r, a)] = rows[gr][j];
            k[(a, nf + r)] = rows[gr][j];
        }
    }
    let mut rhs = Vector::zeros(nf + ng);
    for (a, &i) in free.iter().enumerate() {
        rhs[a] = -grad[i];
    }
    if nf + ng == 0 {
        let mut mult = Vector::zeros(rows.len());
        for j in 0..d {
            if let Some(r) = pinned[j] {
                mult[r] = -grad[j] / rows[r][j];
            }
        }
        return Ok((Vector::zeros(d), mult));
    }
    let lu = k.clone().lu();
    let mut sol = lu.solve(&rhs).ok_or_else(|| Error::InvalidArgument("singular KKT system (dependent working set)".into()))?;
    // one step of iterative refinement
    let res = &rhs - &k * &sol;
    if let Some(corr) = lu.solve(&res) {
        sol += corr;
    }
    let mut step = Vector::zeros(d);
    for (a, &i) in free.iter().enumerate() {
        step[i] = sol[a];
    }
    let mut mult = Vector::zeros(rows.len());
    for (r, &gr) in general.iter().enumerate() {
        mult[gr] = sol[nf + r];
    }
    // bound multipliers from the stationarity rows of the pinned variables
    let hp = h * &step;
    for j in 0..d {
        if let Some(r) = pinned[j] {
            let mut v = hp[j] + grad[j];
            for &gr in &general {
                v += rows[gr][j] * mult[gr];
            }
            mult[r] = -v / rows[r][j];
        }
    }
    Ok((step, mult))
}

fn finish(p: &QpProblem, h: &Mat, z: Vector, eq_keep: &[usize], work: &[usize], mult: &Vector, iterations: usize) -> Result<QpSolution> {
    let mut eq_mult = Vector::zeros(p.a_eq.nrows());
    for (k, &i) in eq_keep.iter().enumerate() {
        eq_mult[i] = mult[k];
    }
    let mut in_mult = Vector::zeros(p.a_in.nrows());
    for (k, &i) in work.iter().enumerate() {
        in_mult[i] = mult[eq_keep.len() + k].max(0.0);
    }
    let stat = h * &z + &p.g + p.a_eq.transpose() * &eq_mult + p.a_in.transpose() * &in_mult;
    let mut active = work.to_vec();
    active.sort_unstable();
    Ok(QpSolution { status: QpStatus::Optimal, objective: p.objective(&z), kkt_residual: stat.amax(), z, eq_multipliers: eq_mult, in_multipliers: in_mult, active, iterations })
}

/// Finds a feasible point, or `None` when the constraints are inconsistent.
fn starting_point(p: &QpProblem, h: &Mat, eq_keep: &[usize], opts: &QpOptions, ftol: f64) -> Result<Option<Vector>> {
    let d = p.dim();
    if let Some(s) = &opts.start {
        if s.len() == d && p.max_violation(s) <= ftol {
            return Ok(Some(s.clone()));
        }
    }
    // equality-constrained minimizer
    let me = eq_keep.len();
    let mut k = Mat::zeros(d + me, d + me);
    k.view_mut((0, 0), (d, d)).copy_from(h);
    for (r, &i) in eq_keep.iter().enumerate() {
        for j in 0..d {
            k[(d + r, j)] = p.a_eq[(i, j)];
            k[(j, d + r)] = p.a_eq[(i, j)];
        }
    }
    let mut rhs = Vector::zeros(d + me);
    rhs.rows_mut(0, d).copy_from(&(-&p.g));
    for (r, &i) in eq_keep.iter().enumerate() {
        rhs[d + r] = p.b_eq[i];
    }
    if let Some(sol) = k.lu().solve(&rhs) {
        let z = sol.rows(0, d).into_owned();
        if linalg::all_finite(z.as_slice()) && p.max_violation(&z) <= ftol {
            return Ok(Some(z));
        }
    }
    let lp = LpProblem::new(Vector::zeros(d)).with_equalities(p.a_eq.clone(), p.b_eq.clone()).with_inequalities(p.a_in.clone(), p.b_in.clone());
    let sol = solve_lp(&lp, Sense::Minimize)?;
    match sol.status {
        LpStatus::Optimal => {
            // a simplex vertex may sit a rounding error outside; the ratio test clamps negative slack
            if p.max_violation(&sol.x) <= 1e3 * ftol {
                Ok(Some(sol.x))
            } else {
                Ok(None)
            }
        }
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimizer_is_g() {
        let g = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        let sol = solve_qp(&QpProblem::new(Mat::identity(3, 3), -&g)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z - g).amax() < 1e-12);
    }

    #[test]
    fn clamped_projection() {
        // (z − 2)² = z² − 4z + 4 → H = 2, g = −4; z ≤ 1
        let p = QpProblem::new(Mat::from_element(1, 1, 2.0), Vector::from_element(1, -4.0)).with_inequalities(Mat::from_element(1, 1, 1.0), Vector::from_element(1, 1.0));
        let sol = solve_qp(&p).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-12);
        assert!((sol.in_multipliers[0] - 2.0).abs() < 1e-10);
        assert_eq!(sol.active, vec![0]);
    }

    #[test]
    fn infeasible_status() {
        let a = Mat::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = Vector::from_vec(vec![-1.0, -1.0]);
        let sol = solve_qp(&QpProblem::new(Mat::identity(1, 1), Vector::zeros(1)).with_inequalities(a, b)).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn psd_hessian_with_lp_like_directions() {
        // min (u − 3)² + 0·λ s.t. u − λ = 0, 0 ≤ λ ≤ 1
        let h = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let g = Vector::from_vec(vec![-6.0, 0.0]);
        let p = QpProblem::new(h, g)
            .with_equalities(Mat::from_row_slice(1, 2, &[1.0, -1.0]), Vector::zeros(1))
            .with_inequalities(Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]), Vector::from_vec(vec![1.0, 0.0]));
        let sol = solve_qp(&p).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn degenerate_vertex_does_not_cycle() {
        // many redundant constraints through the optimum
        let h = Mat::identity(2, 2);
        let g = Vector::from_vec(vec![-2.0, -2.0]);
        let mut a = Mat::zeros(6, 2);
        let mut b = Vector::zeros(6);
        for k in 0..6 {
            let t = k as f64 * 0.2;
            a[(k, 0)] = 1.0 + t;
            a[(k, 1)] = 1.0 - t * 0.5;
            b[k] = a[(k, 0)] + a[(k, 1)];
        }
        let sol = solve_qp(&QpProblem::new(h, g).with_inequalities(a, b)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z.clone() - Vector::from_vec(vec![1.0, 1.0])).amax() < 1e-9);
    }

    #[test]
    fn warm_start_is_used_when_feasible() {
        let p = QpProblem::new(Mat::identity(2, 2), Vector::from_vec(vec![-5.0, 0.0])).with_inequalities(Mat::from_row_slice(1, 2, &[1.0, 0.0]), Vector::from_element(1, 1.0));
        let opts = QpOptions { start: Some(Vector::from_vec(vec![1.0, 0.0])), ..QpOptions::default() };
        let sol = solve_qp_with(&p, &opts).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-12);
        assert_eq!(sol.iterations, 1);
    }
}
