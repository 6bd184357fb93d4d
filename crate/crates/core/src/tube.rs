//! Tube-based CBF control.
//!
//! A nominal state x̄ follows an (ideal) safe controller inside a reduced safe set C′,
//! while an auxiliary feedback κ(x, x̄) = K_aux (x̄ − x) keeps the true state within a
//! tube x̄ ⊕ Ω. Inputs are split as u = ū + κ with ū ∈ U′ = U ⊖ G and κ ∈ G, so the
//! applied input always lies in U, and C′ ⊕ Ω ⊆ C keeps the true state safe.
//!
//! The tube may act on a subset of the state (e.g. the Segway's position is not
//! regulated by κ); `indices` selects those coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{cbf_condition_affine, integrate_interval, Cbf, ControlAffineSystem, Hyperrectangle, Polytope};
use crate::opt::lqr::lqr_gain;
use crate::opt::qp::{solve_qp, QpProblem, QpStatus};

#[derive(Debug, Clone)]
pub struct TubeSpec {
    /// State coordinates the tube constrains.
    pub indices: Vec<usize>,
    /// m × indices.len()
    pub k_aux: Mat,
    /// Error box for z = x − x̄ on `indices`.
    pub omega: Hyperrectangle,
    /// Hull of κ over Ω.
    pub g: Polytope,
    pub u: Polytope,
    pub u_tight: Polytope,
}

impl TubeSpec {
    /// Builds G and U′ = U ⊖ G for a given gain and error box.
    pub fn from_gain(k_aux: Mat, indices: Vec<usize>, u: Polytope, omega: Hyperrectangle) -> Result<Self> {
        let k = indices.len();
        if k_aux.shape() != (u.dim(), k) || omega.dim() != k {
            return Err(Error::Dimension(format!("K_aux {:?}, {} tube coordinates, Ω of dimension {}, {} inputs", k_aux.shape(), k, omega.dim(), u.dim())));
        }
        if !omega.contains(&Vector::zeros(k)) {
            return Err(Error::InvalidArgument("Ω must contain the origin".into()));
        }
        // κ(z) = −K z is linear, so its image of a box is the zonotope with these generators
        let center = -(&k_aux * omega.center());
        let gens = &k_aux * Mat::from_diagonal(&omega.half_widths());
        let g = Polytope::zonotope(&center, &gens)?;
        let support = |d: &Vector| d.dot(&center) + (0..gens.ncols()).map(|j| d.dot(&gens.column(j)).abs()).sum::<f64>();
        let u_tight = match u.erode(support) {
            Ok(p) => p,
            Err(Error::EmptySet(_)) => return Err(Error::TighteningExceedsAuthority),
            Err(e) => return Err(e),
        };
        Ok(Self { indices, k_aux, omega, g, u, u_tight })
    }

    pub fn error(&self, x: &Vector, x_bar: &Vector) -> Vector {
        Vector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i] - x_bar[i]))
    }

    /// κ(x, x̄) = K_aux (x̄ − x).
    pub fn kappa(&self, x: &Vector, x_bar: &Vector) -> Vector {
        -(&self.k_aux * self.error(x, x_bar))
    }

    pub fn in_tube(&self, x: &Vector, x_bar: &Vector, tol: f64) -> bool {
        self.omega.contains_tol(&self.error(x, x_bar), tol)
    }
}

/// Linearization at the origin restricted to `indices`.
pub fn origin_linearization(sys: &dyn ControlAffineSystem, indices: &[usize]) -> (Mat, Mat) {
    let n = sys.state_dim();
    let a = sys.drift_jacobian(&Vector::zeros(n));
    let b = sys.input_matrix(&Vector::zeros(n));
    let k = indices.len();
    (Mat::from_fn(k, k, |i, j| a[(indices[i], indices[j])]), Mat::from_fn(k, b.ncols(), |i, j| b[(indices[i], j)]))
}

/// LQR gain for κ: continuous when `period` is None, otherwise on the exact ZOH discretization.
pub fn auxiliary_gain(sys: &dyn ControlAffineSystem, indices: &[usize], q: &Mat, r: &Mat, period: Option<f64>) -> Result<Mat> {
    let (a, b) = origin_linearization(sys, indices);
    match period {
        None => Ok(lqr_gain(&a, &b, q, r, false)?.k),
        Some(t) => {
            let (ad, bd) = linalg::discretize_zoh(&a, &b, t);
            Ok(lqr_gain(&ad, &bd, q, r, true)?.k)
        }
    }
}

/// K_aux from LQR on the origin linearization, then G and U′.
pub fn build_tube_spec(sys: &dyn ControlAffineSystem, indices: Vec<usize>, u: Polytope, q: &Mat, r: &Mat, period: Option<f64>, omega: Hyperrectangle) -> Result<TubeSpec> {
    let k = auxiliary_gain(sys, &indices, q, r, period)?;
    TubeSpec::from_gain(k, indices, u, omega)
}

/// The box β·extents whose κ-image is exactly [−g_max, g_max] on the tightest input
/// (the fixed-fraction tightening route: pick the input budget, derive Ω from it).
pub fn omega_from_tightening(k_aux: &Mat, extents: &Vector, g_max: f64) -> Result<Hyperrectangle> {
    if !(g_max > 0.0) || extents.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("tightening budget and extents must be positive".into()));
    }
    let reach = (0..k_aux.nrows()).map(|i| (0..k_aux.ncols()).map(|j| k_aux[(i, j)].abs() * extents[j]).sum::<f64>()).fold(0.0, f64::max);
    if reach == 0.0 {
        return Err(Error::InvalidArgument("zero auxiliary gain gives no tube".into()));
    }
    Ok(Hyperrectangle::symmetric(extents * (g_max / reach)))
}

#[derive(Debug, Clone)]
pub struct TubeEstimate {
    pub omega: Hyperrectangle,
    pub trials: usize,
    /// Fraction of certification trials that left Ω (0 for a returned estimate).
    pub escaped_fraction: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone)]
pub struct TubeEstimateOptions {
    pub period: f64,
    pub trials: usize,
    pub horizon_periods: usize,
    pub substeps: usize,
    pub inflation: f64,
    pub max_rounds: usize,
    pub seed: u64,
}

impl Default for TubeEstimateOptions {
    fn default() -> Self {
        Self { period: 0.01, trials: 200, horizon_periods: 300, substeps: 10, inflation: 1.2, max_rounds: 8, seed: 0 }
    }
}

fn boundary_sample(rng: &mut ChaCha8Rng, bx: &Hyperrectangle) -> Vector {
    let k = bx.dim();
    let mut z = Vector::from_fn(k, |i, _| rng.random_range(bx.lo[i]..=bx.hi[i]));
    let face = rng.random_range(0..k);
    z[face] = if rng.random_bool(0.5) { bx.hi[face] } else { bx.lo[face] };
    z
}

/// Peak |z| along the sampled closed loop from z₀ (nominal parked at the origin).
fn error_peak(sys: &dyn ControlAffineSystem, k_aux: &Mat, indices: &[usize], z0: &Vector, opts: &TubeEstimateOptions) -> Result<Vector> {
    let n = sys.state_dim();
    let mut x = Vector::zeros(n);
    for (a, &i) in indices.iter().enumerate() {
        x[i] = z0[a];
    }
    let mut peak = z0.abs();
    let sub = |x: &Vector| Vector::from_iterator(indices.len(), indices.iter().map(|&i| x[i]));
    for k in 0..opts.horizon_periods {
        let u = -(k_aux * sub(&x));
        let pts = integrate_interval(sys, &x, &u, opts.period, opts.substeps, k as f64 * opts.period).map_err(|e| Error::NoTrappingBox(format!("error dynamics diverged: {e}")))?;
        for p in &pts {
            peak = peak.zip_map(&sub(p).abs(), f64::max);
        }
        x = pts.last().expect("substeps ≥ 1").clone();
        if peak.amax() > 1e6 {
            return Err(Error::NoTrappingBox("error dynamics diverged".into()));
        }
    }
    // a trapped trajectory must have settled well inside its peak by the end
    if sub(&x).amax() > 0.5 * peak.amax() {
        return Err(Error::NoTrappingBox(format!("error did not contract over {} periods", opts.horizon_periods)));
    }
    Ok(peak)
}

/// Monte-Carlo surrogate for an error box under ZOH κ: error trajectories start on the
/// boundary of `seed_box`, and the box of their peaks (inflated) is returned once a fresh
/// batch of trials from the same seeds stays inside it. Not a proof of invariance.
pub fn estimate_tube(sys: &dyn ControlAffineSystem, k_aux: &Mat, indices: &[usize], seed_box: &Hyperrectangle, opts: &TubeEstimateOptions) -> Result<TubeEstimate> {
    if indices.len() != seed_box.dim() || k_aux.shape() != (sys.input_dim(), indices.len()) {
        return Err(Error::Dimension("gain, seed box and tube coordinates disagree".into()));
    }
    if opts.trials == 0 || !(opts.period > 0.0) {
        return Err(Error::InvalidArgument("need trials ≥ 1 and period > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut peak = seed_box.half_widths().zip_map(&seed_box.center().abs(), |h, c| h + c);
    for round in 1..=opts.max_rounds {
        for _ in 0..opts.trials {
            let z0 = boundary_sample(&mut rng, seed_box);
            peak = peak.zip_map(&error_peak(sys, k_aux, indices, &z0, opts)?, f64::max);
        }
        let omega = Hyperrectangle::symmetric(&peak * opts.inflation);
        let mut escaped = 0;
        for _ in 0..opts.trials {
            let z0 = boundary_sample(&mut rng, seed_box);
            let p = error_peak(sys, k_aux, indices, &z0, opts)?;
            if !omega.contains_tol(&p, 0.0) {
                escaped += 1;
            }
            peak = peak.zip_map(&p, f64::max);
        }
        if escaped == 0 {
            return Ok(TubeEstimate { omega, trials: opts.trials, escaped_fraction: 0.0, rounds: round });
        }
    }
    Err(Error::NoTrappingBox(format!("trials kept escaping after {} rounds", opts.max_rounds)))
}

// ─── Reduced safe set ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AuditOptions {
    /// Box sampled for the containment audit (should cover C′).
    pub audit_box: Hyperrectangle,
    /// A point with h′ > 0; boundary samples are found along rays from it.
    pub interior: Vector,
    pub grid_per_dim: usize,
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct ReducedSafeSet {
    pub cbf_prime: Cbf,
    /// min over sampled x ∈ C′ and Ω vertices z of h(x + z).
    pub containment_margin: f64,
    /// min over boundary samples of max_{u ∈ vert U′} CBF′(x, u).
    pub viability_margin: f64,
    pub samples: usize,
}

/// Points on {h′ = 0} along rays from the interior point through the grid points.
fn boundary_shell(cbf: &Cbf, opts: &AuditOptions) -> Vec<Vector> {
    let mut out = Vec::new();
    for p in opts.audit_box.grid(opts.grid_per_dim) {
        let d = &p - &opts.interior;
        if d.amax() == 0.0 {
            continue;
        }
        let at = |t: f64| &opts.interior + &d * t;
        let mut hi = 1.0;
        let mut expand = 0;
        while cbf.h(&at(hi)) >= 0.0 && expand < 30 {
            hi *= 2.0;
            expand += 1;
        }
        if cbf.h(&at(hi)) >= 0.0 {
            continue; // unbounded direction
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cbf.h(&at(mid)) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(at(lo));
    }
    out
}

/// Audits a candidate C′ = {h′ ≥ 0}: C′ ⊕ Ω ⊆ C on a grid, and h′ is a valid CBF under U′
/// on its boundary (some vertex of U′ satisfies the CBF condition).
pub fn build_reduced_cbf(sys: &dyn ControlAffineSystem, cbf: &Cbf, cbf_prime: Cbf, spec: &TubeSpec, opts: &AuditOptions) -> Result<ReducedSafeSet> {
    let n = sys.state_dim();
    if opts.audit_box.dim() != n || opts.interior.len() != n || cbf.barrier.dim() != n || cbf_prime.barrier.dim() != n {
        return Err(Error::Dimension("audit data does not match the system".into()));
    }
    if cbf_prime.h(&opts.interior) <= 0.0 {
        return Err(Error::InvalidArgument("audit interior point must satisfy h′ > 0".into()));
    }
    let offsets: Vec<Vector> = spec
        .omega
        .vertices()
        .into_iter()
        .map(|z| {
            let mut full = Vector::zeros(n);
            for (a, &i) in spec.indices.iter().enumerate() {
                full[i] = z[a];
            }
            full
        })
        .collect();
    let shell = boundary_shell(&cbf_prime, opts);
    let grid = opts.audit_box.grid(opts.grid_per_dim);
    let inside: Vec<&Vector> = grid.iter().filter(|x| cbf_prime.h(x) >= 0.0).chain(shell.iter()).collect();

    let mut containment = f64::INFINITY;
    let (mut failures, mut worst_x) = (0, Vector::zeros(n));
    for x in &inside {
        for z in &offsets {
            let v = cbf.h(&(*x + z));
            if v < -opts.tol {
                failures += 1;
            }
            if v < containment {
                containment = v;
                worst_x = (*x).clone();
            }
        }
    }
    if failures > 0 {
        return Err(Error::AuditFailed { audit: "containment", failures, worst: containment, state: worst_x.as_slice().to_vec() });
    }

    let verts = spec.u_tight.vertices()?;
    let mut viability = f64::INFINITY;
    let mut failures = 0;
    for x in &shell {
        let (c, d) = cbf_condition_affine(sys, &cbf_prime, x)?;
        let best = verts.iter().map(|u| c.dot(u) + d).fold(f64::NEG_INFINITY, f64::max);
        if best < -opts.tol {
            failures += 1;
        }
        if best < viability {
            viability = best;
            worst_x = (*x).clone();
        }
    }
    if failures > 0 {
        return Err(Error::AuditFailed { audit: "viability", failures, worst: viability, state: worst_x.as_slice().to_vec() });
    }
    Ok(ReducedSafeSet { cbf_prime, containment_margin: containment, viability_margin: viability, samples: inside.len() + shell.len() })
}

// ─── The tube loop ──────────────────────────────────────────────────────────

/// argmin ‖u − u_nom‖² s.t. CBF(x, u) ≥ 0 and u ∈ U_set (a plain one-row CBF-QP).
pub fn cbf_qp_filter(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector, u_nom: &Vector, u_set: &Polytope) -> Result<Vector> {
    let (c, d) = cbf_condition_affine(sys, cbf, x)?;
    if c.dot(u_nom) + d >= 0.0 && u_set.contains(u_nom, 0.0) {
        return Ok(u_nom.clone());
    }
    let m = u_nom.len();
    let mut a_in = Mat::zeros(1 + u_set.a.nrows(), m);
    let mut b_in = Vector::zeros(1 + u_set.a.nrows());
    a_in.row_mut(0).copy_from(&(-c.transpose()));
    b_in[0] = d;
    a_in.view_mut((1, 0), (u_set.a.nrows(), m)).copy_from(&u_set.a);
    b_in.rows_mut(1, u_set.b.len()).copy_from(&u_set.b);
    let qp = QpProblem::new(Mat::identity(m, m) * 2.0, u_nom * -2.0).with_inequalities(a_in, b_in);
    let sol = solve_qp(&qp)?;
    match sol.status {
        QpStatus::Optimal => Ok(clip_to(&sol.z, u_set)),
        _ => Err(Error::FilterInfeasible { state: x.as_slice().to_vec(), h: cbf.h(x) }),
    }
}

/// Snaps solver round-off back into a box-shaped polytope (no-op for general rows).
pub(crate) fn clip_to(u: &Vector, set: &Polytope) -> Vector {
    let mut out = u.clone();
    for r in 0..set.a.nrows() {
        let row = set.a.row(r);
        let nz: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
        if let [j] = nz[..] {
            let bound = set.b[r] / row[j];
            // solver output within tolerance of a face lands on it; outside points are clipped
            let near = (out[j] - bound).abs() <= 1e-9 * (1.0 + bound.abs());
            let outside = (row[j] > 0.0 && out[j] > bound) || (row[j] < 0.0 && out[j] < bound);
            if near || outside {
                out[j] = bound;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TubeStep {
    /// Nominal input ū ∈ U′.
    pub u_bar: Vector,
    pub kappa: Vector,
    /// ū + κ, applied to the plant.
    pub u: Vector,
    pub x_next: Vector,
    /// Nominal state propagated under ū (before re-anchoring).
    pub x_bar_propagated: Vector,
    pub x_bar_next: Vector,
    pub reanchored: bool,
    /// min h′ along the propagated nominal substeps.
    pub min_h_prime_bar: f64,
}

/// Picks x̄_next near x̄_prop with x_next − x̄_next ∈ Ω and h′(x̄_next) ≥ 0.
///
/// Keeps x̄_prop when it already qualifies; otherwise projects with a QP whose h′ row is
/// linearized and re-linearized (≤ 5 passes), finishing with a bisection toward x_next.
pub fn reanchor(spec: &TubeSpec, cbf_prime: &Cbf, x_bar_prop: &Vector, x_next: &Vector, time: f64) -> Result<(Vector, bool)> {
    if spec.in_tube(x_next, x_bar_prop, 0.0) && cbf_prime.h(x_bar_prop) >= 0.0 {
        return Ok((x_bar_prop.clone(), false));
    }
    let n = x_bar_prop.len();
    // tube rows: x_i − hi_i ≤ x̄_i ≤ x_i − lo_i
    let k = spec.indices.len();
    let clamp = |y: &Vector| {
        let mut y = y.clone();
        for (a, &i) in spec.indices.iter().enumerate() {
            y[i] = y[i].clamp(x_next[i] - spec.omega.hi[a], x_next[i] - spec.omega.lo[a]);
        }
        y
    };
    let margin = 1e-9;
    let mut y = clamp(x_bar_prop);
    for _ in 0..5 {
        if cbf_prime.h(&y) >= 0.0 {
            break;
        }
        let g = cbf_prime.grad_h(&y);
        let mut a_in = Mat::zeros(2 * k + 1, n);
        let mut b_in = Vector::zeros(2 * k + 1);
        for (a, &i) in spec.indices.iter().enumerate() {
            a_in[(2 * a, i)] = 1.0;
            b_in[2 * a] = x_next[i] - spec.omega.lo[a];
            a_in[(2 * a + 1, i)] = -1.0;
            b_in[2 * a + 1] = -(x_next[i] - spec.omega.hi[a]);
        }
        // h′(y) + ∇h′ᵀ(x̄ − y) ≥ margin
        a_in.row_mut(2 * k).copy_from(&(-g.transpose()));
        b_in[2 * k] = cbf_prime.h(&y) - g.dot(&y) - margin;
        let qp = QpProblem::new(Mat::identity(n, n) * 2.0, x_bar_prop * -2.0).with_inequalities(a_in, b_in);
        let sol = solve_qp(&qp)?;
        if sol.status != QpStatus::Optimal {
            return Err(Error::TubeBreach { time });
        }
        y = clamp(&sol.z);
    }
    if cbf_prime.h(&y) < 0.0 {
        // the tube box is convex and {h′ ≥ 0} is assumed convex: walk toward x_next
        if cbf_prime.h(x_next) < 0.0 {
            return Err(Error::TubeBreach { time });
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if cbf_prime.h(&(&y + (x_next - &y) * mid)) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        y = clamp(&(&y + (x_next - &y) * hi));
        if cbf_prime.h(&y) < 0.0 {
            return Err(Error::TubeBreach { time });
        }
    }
    if !spec.in_tube(x_next, &y, 1e-12 * (1.0 + x_next.amax())) {
        return Err(Error::TubeBreach { time });
    }
    Ok((y, true))
}

/// Steps 2–4 of the tube loop: nominal input, applied input, plant step, re-anchoring.
///
/// `u_bar_candidate` is the nominal controller's proposal at x̄; it is filtered onto
/// {CBF′(x̄, ·) ≥ 0} ∩ U′ if needed. `plant` advances the true system by one period.
#[allow(clippy::too_many_arguments)]
pub fn tube_cbf_step(
    sys: &dyn ControlAffineSystem,
    spec: &TubeSpec,
    reduced: &ReducedSafeSet,
    u_bar_candidate: &Vector,
    plant: &mut dyn FnMut(&Vector) -> Result<Vector>,
    x: &Vector,
    x_bar: &Vector,
    time: f64,
    period: f64,
    substeps: usize,
) -> Result<TubeStep> {
    let u_bar = cbf_qp_filter(sys, &reduced.cbf_prime, x_bar, u_bar_candidate, &spec.u_tight)?;
    let kappa = spec.kappa(x, x_bar);
    let u = &u_bar + &kappa;
    let x_next = plant(&u)?;
    let pts = integrate_interval(sys, x_bar, &u_bar, period, substeps, time)?;
    let min_h_prime_bar = pts.iter().map(|p| reduced.cbf_prime.h(p)).fold(f64::INFINITY, f64::min);
    let x_bar_propagated = pts.last().expect("substeps ≥ 1").clone();
    let (x_bar_next, reanchored) = reanchor(spec, &reduced.cbf_prime, &x_bar_propagated, &x_next, time + period)?;
    Ok(TubeStep { u_bar, kappa, u, x_next, x_bar_propagated, x_bar_next, reanchored, min_h_prime_bar })
}
