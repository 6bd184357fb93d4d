//! Dense two-phase simplex over free variables.
//!
//! Problems are stated as `min/max cᵀz s.t. A_ub z ≤ b_ub, A_eq z = b_eq` with `z` free;
//! internally every variable is split into a nonnegative pair and inequality rows get
//! slacks. Dantzig pricing is used until a run of degenerate pivots shows up, after
//! which Bland's rule takes over for the rest of the solve.

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpProblem {
    pub c: Vector,
    pub a_ub: Mat,
    pub b_ub: Vector,
    pub a_eq: Mat,
    pub b_eq: Vector,
}

impl LpProblem {
    pub fn new(c: Vector) -> Self {
        let n = c.len();
        Self { c, a_ub: Mat::zeros(0, n), b_ub: Vector::zeros(0), a_eq: Mat::zeros(0, n), b_eq: Vector::zeros(0) }
    }

    pub fn with_inequalities(mut self, a: Mat, b: Vector) -> Self {
        self.a_ub = a;
        self.b_ub = b;
        self
    }

    pub fn with_equalities(mut self, a: Mat, b: Vector) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    fn check(&self) -> Result<()> {
        let n = self.c.len();
        if self.a_ub.ncols() != n || self.a_eq.ncols() != n {
            return Err(Error::Dimension(format!("LP with {n} variables got constraint matrices with {} / {} columns", self.a_ub.ncols(), self.a_eq.ncols())));
        }
        if self.a_ub.nrows() != self.b_ub.len() || self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::Dimension("LP constraint rows and right-hand sides differ in length".into()));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !(finite(self.c.as_slice()) && finite(self.a_ub.as_slice()) && finite(self.b_ub.as_slice()) && finite(self.a_eq.as_slice()) && finite(self.b_eq.as_slice())) {
            return Err(Error::InvalidArgument("LP data contains non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vector,
    pub value: f64,
    pub pivots: usize,
}

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;

struct Tableau {
    t: Mat,
    basis: Vec<usize>,
    rows: usize,
    rhs: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[(r, c)];
        let ncols = self.t.ncols();
        for j in 0..ncols {
            self.t[(r, j)] /= p;
        }
        for i in 0..self.t.nrows() {
            if i == r {
                continue;
            }
            let f = self.t[(i, c)];
            if f != 0.0 {
                for j in 0..ncols {
                    let v = self.t[(r, j)];
                    if v != 0.0 {
                        self.t[(i, j)] -= f * v;
                    }
                }
                self.t[(i, c)] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    /// Runs simplex pivots on the objective stored in the last row; columns `>= eligible` never enter.
    fn run(&mut self, eligible: usize, pivots: &mut usize, cap: usize) -> Result<bool> {
        let obj = self.rows;
        let mut bland = false;
        let mut degenerate_run = 0usize;
        loop {
            let scale = 1.0 + (0..eligible).map(|j| self.t[(obj, j)].abs()).fold(0.0, f64::max);
            let mut enter = None;
            let mut best = -COST_TOL * scale;
            for j in 0..eligible {
                let rc = self.t[(obj, j)];
                if rc < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = rc;
                }
            }
            let Some(col) = enter else { return Ok(true) };
            let mut leave: Option<usize> = None;
            let mut ratio = f64::INFINITY;
            for i in 0..self.rows {
                let a = self.t[(i, col)];
                if a > PIVOT_TOL {
                    let q = self.t[(i, self.rhs)].max(0.0) / a;
                    match leave {
                        None => {
                            leave = Some(i);
                            ratio = q;
                        }
                        Some(l) => {
                            let tie = 1e-12 * (1.0 + ratio);
                            if q < ratio - tie {
                                leave = Some(i);
                                ratio = q;
                            } else if q <= ratio + tie && self.basis[i] < self.basis[l] {
                                leave = Some(i);
                                ratio = ratio.min(q);
                            }
                        }
                    }
                }
            }
            let Some(row) = leave else { return Ok(false) };
            if ratio <= 1e-12 {
                degenerate_run += 1;
                if degenerate_run > 25 {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
            self.pivot(row, col);
            *pivots += 1;
            if *pivots > cap {
                return Err(Error::NonConvergence { solver: "simplex", iterations: *pivots, residual: f64::NAN });
            }
        }
    }
}

/// Solves an LP; infeasibility and unboundedness are reported through `status`.
pub fn solve_lp(p: &LpProblem, sense: Sense) -> Result<LpSolution> {
    p.check()?;
    let n = p.c.len();
    let mu = p.a_ub.nrows();
    let me = p.a_eq.nrows();
    let m = mu + me;
    let structural = 2 * n + mu;
    let ncols = structural + m;
    let rhs = ncols;
    let cost: Vector = match sense {
        Sense::Minimize => p.c.clone(),
        Sense::Maximize => -&p.c,
    };

    // standard-form matrix without artificials (kept for the final basis re-solve)
    let mut a_std = Mat::zeros(m, structural);
    let mut b_std = Vector::zeros(m);
    for i in 0..m {
        let (row, b) = if i < mu { (p.a_ub.row(i), p.b_ub[i]) } else { (p.a_eq.row(i - mu), p.b_eq[i - mu]) };
        let sign = if b < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            a_std[(i, k)] = sign * row[k];
            a_std[(i, n + k)] = -sign * row[k];
        }
        if i < mu {
            a_std[(i, 2 * n + i)] = sign;
        }
        b_std[i] = sign * b;
    }

    let mut tab = Tableau { t: Mat::zeros(m + 1, ncols + 1), basis: (structural..ncols).collect(), rows: m, rhs };
    for i in 0..m {
        for j in 0..structural {
            tab.t[(i, j)] = a_std[(i, j)];
        }
        tab.t[(i, structural + i)] = 1.0;
        tab.t[(i, rhs)] = b_std[i];
    }
    // phase 1: minimize the sum of artificials
    for j in 0..structural {
        tab.t[(m, j)] = -(0..m).map(|i| a_std[(i, j)]).sum::<f64>();
    }
    tab.t[(m, rhs)] = -b_std.sum();

    let cap = 50 * (m + ncols).max(10);
    let mut pivots = 0;
    tab.run(structural, &mut pivots, cap)?;
    let infeas = -tab.t[(m, rhs)];
    let bscale = 1.0 + b_std.amax();
    if infeas > 1e-9 * bscale {
        return Ok(LpSolution { status: LpStatus::Infeasible, x: Vector::zeros(n), value: f64::NAN, pivots });
    }
    // drive zero-level artificials out of the basis; rows that cannot be freed are redundant
    let mut redundant = vec![false; m];
    for i in 0..m {
        if tab.basis[i] >= structural {
            let col = (0..structural).filter(|&j| tab.t[(i, j)].abs() > 1e-9).max_by(|&a, &b| tab.t[(i, a)].abs().total_cmp(&tab.t[(i, b)].abs()));
            match col {
                Some(j) => {
                    tab.pivot(i, j);
                    pivots += 1;
                }
                None => redundant[i] = true,
            }
        }
    }

    // phase 2
    let full_cost = |j: usize| {
        if j < n {
            cost[j]
        } else if j < 2 * n {
            -cost[j - n]
        } else {
            0.0
        }
    };
    for j in 0..=ncols {
        let mut r = if j < structural { full_cost(j) } else { 0.0 };
        for i in 0..m {
            if redundant[i] {
                continue;
            }
            let bj = tab.basis[i];
            let cb = if bj < structural { full_cost(bj) } else { 0.0 };
            r -= cb * tab.t[(i, j)];
        }
        tab.t[(m, j)] = r;
    }
    // redundant rows keep their artificial basic at zero; zero them out so they never block
    for i in 0..m {
        if redundant[i] {
            for j in 0..=ncols {
                tab.t[(i, j)] = 0.0;
            }
        }
    }
    let bounded = tab.run(structural, &mut pivots, cap)?;
    if !bounded {
        let value = match sense {
            Sense::Minimize => f64::NEG_INFINITY,
            Sense::Maximize => f64::INFINITY,
        };
        return Ok(LpSolution { status: LpStatus::Unbounded, x: Vector::zeros(n), value, pivots });
    }

    let mut xs = Vector::zeros(structural);
    for i in 0..m {
        if !redundant[i] && tab.basis[i] < structural {
            xs[tab.basis[i]] = tab.t[(i, rhs)];
        }
    }
    // re-solve the basic system on the original data to shed accumulated pivot error
    let basic: Vec<(usize, usize)> = (0..m).filter(|&i| !redundant[i] && tab.basis[i] < structural).map(|i| (i, tab.basis[i])).collect();
    if !basic.is_empty() {
        let rows: Vec<usize> = basic.iter().map(|&(i, _)| i).collect();
        let bm = Mat::from_fn(rows.len(), basic.len(), |r, c| a_std[(rows[r], basic[c].1)]);
        let bb = Vector::from_fn(rows.len(), |r, _| b_std[rows[r]]);
        if let Some(sol) = bm.lu().solve(&bb) {
            let ok = sol.iter().all(|v| v.is_finite() && *v >= -1e-7 * (1.0 + bscale));
            if ok {
                for (c, &(_, j)) in basic.iter().enumerate() {
                    xs[j] = sol[c].max(0.0);
                }
            }
        }
    }
    let x = Vector::from_fn(n, |k, _| xs[k] - xs[n + k]);
    let value = p.c.dot(&x);
    Ok(LpSolution { status: LpStatus::Optimal, x, value, pivots })
}
