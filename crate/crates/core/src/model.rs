//! Control-affine systems, barrier functions, sets and zero-order-hold simulation.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::opt::lp::{solve_lp, LpProblem, LpStatus, Sense};
use crate::opt::polyfit::Polynomial;

// ─── Systems ────────────────────────────────────────────────────────────────

/// ẋ = f(x) + B(x)u.
pub trait ControlAffineSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &Vector) -> Vector;
    fn input_matrix(&self, x: &Vector) -> Mat;

    fn drift_jacobian(&self, x: &Vector) -> Mat {
        linalg::fd_jacobian(x, |y| self.drift(y))
    }

    /// ∂B/∂x_j, one n×m matrix per state coordinate.
    fn input_matrix_jacobian(&self, x: &Vector) -> Vec<Mat> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let flat = linalg::fd_jacobian(x, |y| Vector::from_column_slice(self.input_matrix(y).as_slice()));
        (0..n).map(|j| Mat::from_column_slice(n, m, flat.column(j).as_slice())).collect()
    }

    /// States outside this box are treated as a diverged simulation.
    fn validity_box(&self) -> Option<Hyperrectangle> {
        None
    }

    fn velocity(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.input_matrix(x) * u
    }
}

/// f + B u with the offending component named when something is not finite.
pub fn checked_velocity(sys: &dyn ControlAffineSystem, x: &Vector, u: &Vector) -> Result<Vector> {
    let f = sys.drift(x);
    if !linalg::all_finite(f.as_slice()) {
        return Err(Error::NonFinite { component: "f", state: x.as_slice().to_vec() });
    }
    let b = sys.input_matrix(x);
    if !linalg::all_finite(b.as_slice()) {
        return Err(Error::NonFinite { component: "B", state: x.as_slice().to_vec() });
    }
    Ok(f + b * u)
}

type VecMap = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type MatMap = Arc<dyn Fn(&Vector) -> Mat + Send + Sync>;

/// A system given by closures; Jacobians fall back to finite differences.
#[derive(Clone)]
pub struct FnSystem {
    n: usize,
    m: usize,
    f: VecMap,
    b: MatMap,
    validity: Option<Hyperrectangle>,
}

impl FnSystem {
    pub fn new(n: usize, m: usize, f: impl Fn(&Vector) -> Vector + Send + Sync + 'static, b: impl Fn(&Vector) -> Mat + Send + Sync + 'static) -> Self {
        Self { n, m, f: Arc::new(f), b: Arc::new(b), validity: None }
    }

    pub fn with_validity_box(mut self, bx: Hyperrectangle) -> Self {
        self.validity = Some(bx);
        self
    }
}

impl fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnSystem(n = {}, m = {})", self.n, self.m)
    }
}

impl ControlAffineSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, x: &Vector) -> Vector {
        (self.f)(x)
    }
    fn input_matrix(&self, x: &Vector) -> Mat {
        (self.b)(x)
    }
    fn validity_box(&self) -> Option<Hyperrectangle> {
        self.validity.clone()
    }
}

/// ẋ = Ax + Bu with exact Jacobians.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: Mat,
    pub b: Mat,
}

impl ControlAffineSystem for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn drift(&self, x: &Vector) -> Vector {
        &self.a * x
    }
    fn input_matrix(&self, _x: &Vector) -> Mat {
        self.b.clone()
    }
    fn drift_jacobian(&self, _x: &Vector) -> Mat {
        self.a.clone()
    }
    fn input_matrix_jacobian(&self, _x: &Vector) -> Vec<Mat> {
        vec![Mat::zeros(self.b.nrows(), self.b.ncols()); self.a.nrows()]
    }
}

// ─── Barrier functions ──────────────────────────────────────────────────────

pub trait BarrierFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;

    fn hessian(&self, x: &Vector) -> Mat {
        linalg::symmetrize(&linalg::fd_jacobian(x, |y| self.gradient(y)))
    }
}

/// h(x) = c − zᵀPz with z = (x − x₀) restricted to `indices`.
#[derive(Debug, Clone)]
pub struct QuadraticBarrier {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub shape: Mat,
    pub level: f64,
    pub center: Vector,
}

impl QuadraticBarrier {
    pub fn new(dim: usize, indices: Vec<usize>, shape: Mat, level: f64) -> Result<Self> {
        let k = indices.len();
        if shape.shape() != (k, k) || indices.iter().any(|&i| i >= dim) {
            return Err(Error::Dimension(format!("quadratic barrier: shape {:?} for {} selected coordinates of {dim}", shape.shape(), k)));
        }
        if !linalg::is_symmetric(&shape, 1e-12) {
            return Err(Error::InvalidArgument("quadratic barrier shape must be symmetric".into()));
        }
        Ok(Self { dim, indices, shape, level, center: Vector::zeros(dim) })
    }

    pub fn sub(&self, x: &Vector) -> Vector {
        Vector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i] - self.center[i]))
    }

    /// Semi-axis extent of the zero level set along selected coordinate `k`: √(c·(P⁻¹)_kk).
    pub fn extents(&self) -> Option<Vector> {
        let inv = self.shape.clone().try_inverse()?;
        Some(Vector::from_fn(self.indices.len(), |k, _| (self.level * inv[(k, k)]).max(0.0).sqrt()))
    }
}

impl BarrierFunction for QuadraticBarrier {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &Vector) -> f64 {
        let z = self.sub(x);
        self.level - z.dot(&(&self.shape * &z))
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let gz = &self.shape * self.sub(x) * -2.0;
        let mut g = Vector::zeros(self.dim);
        for (k, &i) in self.indices.iter().enumerate() {
            g[i] += gz[k];
        }
        g
    }
    fn hessian(&self, _x: &Vector) -> Mat {
        let mut hm = Mat::zeros(self.dim, self.dim);
        for (a, &i) in self.indices.iter().enumerate() {
            for (b, &j) in self.indices.iter().enumerate() {
                hm[(i, j)] += -2.0 * self.shape[(a, b)];
            }
        }
        hm
    }
}

/// A fitted polynomial acting on selected coordinates.
#[derive(Debug, Clone)]
pub struct PolynomialBarrier {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub polynomial: Polynomial,
}

impl PolynomialBarrier {
    fn sub(&self, x: &Vector) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }
}

impl BarrierFunction for PolynomialBarrier {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &Vector) -> f64 {
        self.polynomial.eval(&self.sub(x))
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let gz = self.polynomial.gradient(&self.sub(x));
        let mut g = Vector::zeros(self.dim);
        for (k, &i) in self.indices.iter().enumerate() {
            g[i] += gz[k];
        }
        g
    }
}

type ScalarMap = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

/// Closure-backed barrier; the gradient defaults to finite differences.
#[derive(Clone)]
pub struct FnBarrier {
    dim: usize,
    h: ScalarMap,
    grad: Option<VecMap>,
}

impl FnBarrier {
    pub fn new(dim: usize, h: impl Fn(&Vector) -> f64 + Send + Sync + 'static) -> Self {
        Self { dim, h: Arc::new(h), grad: None }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }
}

impl BarrierFunction for FnBarrier {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &Vector) -> f64 {
        (self.h)(x)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        match &self.grad {
            Some(g) => g(x),
            None => linalg::fd_gradient(x, |y| (self.h)(y)),
        }
    }
}

/// Extended class-K rate α.
#[derive(Clone)]
pub enum ClassK {
    Linear(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl ClassK {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            ClassK::Linear(g) => g * r,
            ClassK::Custom(f) => f(r),
        }
    }

    /// α(0) = 0 and strictly increasing on a grid over [−span, span].
    pub fn validate(&self, span: f64) -> Result<()> {
        if self.eval(0.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("class-K function must vanish at 0".into()));
        }
        let n = 200;
        let mut prev = self.eval(-span);
        for i in 1..=n {
            let r = -span + 2.0 * span * i as f64 / n as f64;
            let v = self.eval(r);
            if !(v > prev) {
                return Err(Error::InvalidArgument(format!("class-K function is not increasing near r = {r}")));
            }
            prev = v;
        }
        Ok(())
    }
}

impl fmt::Debug for ClassK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassK::Linear(g) => write!(f, "Linear({g})"),
            ClassK::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A barrier h with rate α; the safe set is {h ≥ 0}.
#[derive(Clone)]
pub struct Cbf {
    pub barrier: Arc<dyn BarrierFunction>,
    pub alpha: ClassK,
}

impl fmt::Debug for Cbf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cbf(dim = {}, alpha = {:?})", self.barrier.dim(), self.alpha)
    }
}

impl Cbf {
    pub fn new(barrier: impl BarrierFunction + 'static, alpha: ClassK) -> Self {
        Self { barrier: Arc::new(barrier), alpha }
    }

    pub fn h(&self, x: &Vector) -> f64 {
        self.barrier.value(x)
    }

    pub fn grad_h(&self, x: &Vector) -> Vector {
        self.barrier.gradient(x)
    }

    pub fn alpha(&self, r: f64) -> f64 {
        self.alpha.eval(r)
    }
}

/// ∇h(x)ᵀ(f(x) + B(x)u) + α(h(x)); nonnegative means the CBF condition holds.
pub fn eval_cbf_condition(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector, u: &Vector) -> Result<f64> {
    if x.len() != sys.state_dim() || u.len() != sys.input_dim() || cbf.barrier.dim() != sys.state_dim() {
        return Err(Error::Dimension(format!("x has {} entries, u has {}, system is {}×{}", x.len(), u.len(), sys.state_dim(), sys.input_dim())));
    }
    let v = checked_velocity(sys, x, u)?;
    let h = cbf.h(x);
    if !h.is_finite() {
        return Err(Error::NonFinite { component: "h", state: x.as_slice().to_vec() });
    }
    let g = cbf.grad_h(x);
    if !linalg::all_finite(g.as_slice()) {
        return Err(Error::NonFinite { component: "grad_h", state: x.as_slice().to_vec() });
    }
    let a = cbf.alpha(h);
    if !a.is_finite() {
        return Err(Error::NonFinite { component: "alpha", state: x.as_slice().to_vec() });
    }
    Ok(g.dot(&v) + a)
}

/// Affine form of the CBF condition at x: condition(u) = cᵀu + d.
pub fn cbf_condition_affine(sys: &dyn ControlAffineSystem, cbf: &Cbf, x: &Vector) -> Result<(Vector, f64)> {
    let m = sys.input_dim();
    let d = eval_cbf_condition(sys, cbf, x, &Vector::zeros(m))?;
    let c = sys.input_matrix(x).transpose() * cbf.grad_h(x);
    Ok((c, d))
}

// ─── Sets ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperrectangle {
    pub lo: Vector,
    pub hi: Vector,
}

impl Hyperrectangle {
    pub fn new(lo: Vector, hi: Vector) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("box bounds differ in length".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidArgument(format!("box needs lo ≤ hi, got {lo:?} / {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn from_slices(lo: &[f64], hi: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(lo), Vector::from_column_slice(hi))
    }

    pub fn symmetric(half_widths: Vector) -> Self {
        let hw = half_widths.map(f64::abs);
        Self { lo: -&hw, hi: hw }
    }

    pub fn point(x: Vector) -> Self {
        Self { lo: x.clone(), hi: x }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vector {
        (&self.lo + &self.hi) * 0.5
    }

    pub fn half_widths(&self) -> Vector {
        (&self.hi - &self.lo) * 0.5
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.contains_tol(x, 0.0)
    }

    pub fn contains_tol(&self, x: &Vector, tol: f64) -> bool {
        x.len() == self.dim() && (0..self.dim()).all(|i| x[i] >= self.lo[i] - tol && x[i] <= self.hi[i] + tol)
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    /// All 2ⁿ corners (degenerate coordinates repeat), bit i of the index picks hi_i.
    pub fn vertices(&self) -> Vec<Vector> {
        let n = self.dim();
        (0..1usize << n).map(|mask| Vector::from_fn(n, |i, _| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })).collect()
    }

    /// Regular grid with `per_dim` points per non-degenerate coordinate.
    pub fn grid(&self, per_dim: usize) -> Vec<Vector> {
        let n = self.dim();
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                if self.lo[i] == self.hi[i] || per_dim < 2 {
                    vec![self.center()[i]]
                } else {
                    (0..per_dim).map(|k| self.lo[i] + (self.hi[i] - self.lo[i]) * k as f64 / (per_dim - 1) as f64).collect()
                }
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut out = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut x = Vector::zeros(n);
            for i in 0..n {
                let len = axes[i].len();
                x[i] = axes[i][idx % len];
                idx /= len;
            }
            out.push(x);
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let hw = self.half_widths() * factor;
        Self { lo: &c - &hw, hi: &c + &hw }
    }

    pub fn contains_box(&self, other: &Hyperrectangle, tol: f64) -> bool {
        self.contains_tol(&other.lo, tol) && self.contains_tol(&other.hi, tol)
    }
}

/// {u | Au ≤ b}, certified nonempty at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub a: Mat,
    pub b: Vector,
}

impl Polytope {
    pub fn new(a: Mat, b: Vector) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension("polytope rows and offsets differ in length".into()));
        }
        let lp = LpProblem::new(Vector::zeros(a.ncols())).with_inequalities(a.clone(), b.clone());
        match solve_lp(&lp, Sense::Minimize)?.status {
            LpStatus::Infeasible => Err(Error::EmptySet("polytope has no interior or boundary point".into())),
            _ => Ok(Self { a, b }),
        }
    }

    pub fn from_box(bx: &Hyperrectangle) -> Result<Self> {
        let n = bx.dim();
        let mut a = Mat::zeros(2 * n, n);
        let mut b = Vector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = bx.hi[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -bx.lo[i];
        }
        Self::new(a, b)
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::from_box(&Hyperrectangle::from_slices(&[lo], &[hi])?)
    }

    /// H-representation of the zonotope c ⊕ Σ [−1,1]·g_i (columns of `generators`).
    pub fn zonotope(center: &Vector, generators: &Mat) -> Result<Self> {
        let m = center.len();
        let gens: Vec<Vector> = (0..generators.ncols()).map(|j| generators.column(j).into_owned()).filter(|g| g.amax() > 0.0).collect();
        let mut normals: Vec<Vector> = Vec::new();
        if m == 1 {
            normals.push(Vector::from_element(1, 1.0));
        } else {
            for subset in linalg::combinations(gens.len(), m - 1) {
                // generalized cross product: cofactors of the m×(m−1) generator block
                let sub = Mat::from_fn(m, m - 1, |i, k| gens[subset[k]][i]);
                let mut nvec = Vector::from_fn(m, |i, _| {
                    let minor = sub.clone().remove_row(i);
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    sign * minor.determinant()
                });
                let norm = nvec.norm();
                if norm <= 1e-12 * (1.0 + sub.amax()).powi(m as i32 - 1) {
                    continue;
                }
                nvec /= norm;
                if !normals.iter().any(|q| (q - &nvec).amax() < 1e-10 || (q + &nvec).amax() < 1e-10) {
                    normals.push(nvec);
                }
            }
            // axis normals keep degenerate (flat) zonotopes closed in every direction
            for i in 0..m {
                let e = Vector::from_fn(m, |k, _| if k == i { 1.0 } else { 0.0 });
                if !normals.iter().any(|q| (q - &e).amax() < 1e-10 || (q + &e).amax() < 1e-10) {
                    normals.push(e);
                }
            }
        }
        let mut a = Mat::zeros(2 * normals.len(), m);
        let mut b = Vector::zeros(2 * normals.len());
        for (k, nv) in normals.iter().enumerate() {
            let reach: f64 = gens.iter().map(|g| nv.dot(g).abs()).sum();
            let c = nv.dot(center);
            a.row_mut(2 * k).copy_from(&nv.transpose());
            b[2 * k] = c + reach;
            a.row_mut(2 * k + 1).copy_from(&(-nv.transpose()));
            b[2 * k + 1] = -c + reach;
        }
        Self::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn contains(&self, u: &Vector, tol: f64) -> bool {
        u.len() == self.dim() && (&self.a * u - &self.b).iter().all(|v| *v <= tol)
    }

    /// max dᵀu over the polytope.
    pub fn support(&self, d: &Vector) -> Result<f64> {
        let lp = LpProblem::new(d.clone()).with_inequalities(self.a.clone(), self.b.clone());
        let sol = solve_lp(&lp, Sense::Maximize)?;
        match sol.status {
            LpStatus::Optimal => Ok(sol.value),
            LpStatus::Unbounded => Ok(f64::INFINITY),
            LpStatus::Infeasible => Err(Error::EmptySet("support of an empty polytope".into())),
        }
    }

    pub fn is_bounded(&self) -> Result<bool> {
        for i in 0..self.dim() {
            for s in [1.0, -1.0] {
                let d = Vector::from_fn(self.dim(), |k, _| if k == i { s } else { 0.0 });
                if !self.support(&d)?.is_finite() {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Vertices by enumerating all m-subsets of facets (fine for the small input spaces here).
    pub fn vertices(&self) -> Result<Vec<Vector>> {
        if !self.is_bounded()? {
            return Err(Error::Unbounded("vertex enumeration needs a bounded polytope".into()));
        }
        let m = self.dim();
        let p = self.a.nrows();
        let scale = 1.0 + self.b.amax();
        let mut out: Vec<Vector> = Vec::new();
        for subset in linalg::combinations(p, m) {
            let am = Mat::from_fn(m, m, |i, j| self.a[(subset[i], j)]);
            let bm = Vector::from_fn(m, |i, _| self.b[subset[i]]);
            let Some(v) = am.lu().solve(&bm) else { continue };
            if !linalg::all_finite(v.as_slice()) || !self.contains(&v, 1e-9 * scale) {
                continue;
            }
            if !out.iter().any(|w| (w - &v).amax() <= 1e-9 * scale) {
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Bounding box (requires boundedness).
    pub fn bounding_box(&self) -> Result<Hyperrectangle> {
        let m = self.dim();
        let mut lo = Vector::zeros(m);
        let mut hi = Vector::zeros(m);
        for i in 0..m {
            let e = Vector::from_fn(m, |k, _| if k == i { 1.0 } else { 0.0 });
            hi[i] = self.support(&e)?;
            lo[i] = -self.support(&(-&e))?;
            if !hi[i].is_finite() || !lo[i].is_finite() {
                return Err(Error::Unbounded("polytope is unbounded".into()));
            }
        }
        Hyperrectangle::new(lo, hi)
    }

    /// Pontryagin difference {u | u + g ∈ self ∀g ∈ G} for G given by its support function.
    /// Offsets are rounded toward the interior, so U ⊖ G ⊕ G ⊆ U holds exactly.
    pub fn erode(&self, support_of_g: impl Fn(&Vector) -> f64) -> Result<Self> {
        let b = Vector::from_fn(self.a.nrows(), |i, _| inward_difference(self.b[i], support_of_g(&self.a.row(i).transpose())));
        Self::new(self.a.clone(), b)
    }
}

/// Largest float not above the exact a − b (TwoSum recovers the rounding error).
fn inward_difference(a: f64, b: f64) -> f64 {
    let d = a - b;
    if !d.is_finite() {
        return d;
    }
    let y = -b;
    let bv = d - a;
    let err = (a - (d - bv)) + (y - bv);
    if err < 0.0 {
        d.next_down()
    } else {
        d
    }
}

// ─── Trajectories and simulation ────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    /// One input per controller interval.
    pub inputs: Vec<Vector>,
    pub h_values: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() {
            return Err(Error::Dimension("times and states differ in length".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("times must be strictly increasing".into()));
        }
        if let Some(h) = &self.h_values {
            if h.len() != self.states.len() {
                return Err(Error::Dimension("h trace and states differ in length".into()));
            }
        }
        Ok(())
    }

    pub fn attach_barrier(&mut self, cbf: &Cbf) {
        self.h_values = Some(self.states.iter().map(|x| cbf.h(x)).collect());
    }

    pub fn final_state(&self) -> Option<&Vector> {
        self.states.last()
    }
}

/// One classical RK4 step with the input held constant.
pub fn rk4_step(sys: &dyn ControlAffineSystem, x: &Vector, u: &Vector, dt: f64) -> Vector {
    let k1 = sys.velocity(x, u);
    let k2 = sys.velocity(&(x + &k1 * (dt / 2.0)), u);
    let k3 = sys.velocity(&(x + &k2 * (dt / 2.0)), u);
    let k4 = sys.velocity(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Integrates one ZOH interval; returns the state after every substep (excluding x).
pub fn integrate_interval(sys: &dyn ControlAffineSystem, x: &Vector, u: &Vector, duration: f64, substeps: usize, t0: f64) -> Result<Vec<Vector>> {
    let dt = duration / substeps as f64;
    let validity = sys.validity_box();
    let mut out = Vec::with_capacity(substeps);
    let mut cur = x.clone();
    for j in 0..substeps {
        cur = rk4_step(sys, &cur, u, dt);
        if !linalg::all_finite(cur.as_slice()) {
            return Err(Error::NonFinite { component: "state", state: cur.as_slice().to_vec() });
        }
        if let Some(bx) = &validity {
            if !bx.contains(&cur) {
                return Err(Error::Divergence { time: t0 + (j + 1) as f64 * dt, state: cur.as_slice().to_vec() });
            }
        }
        out.push(cur.clone());
    }
    Ok(out)
}

/// Simulates ẋ = f + Bu under a sampled controller held constant over each period.
pub fn zoh_rollout(sys: &dyn ControlAffineSystem, controller: &mut dyn FnMut(&Vector, f64) -> Result<Vector>, x0: &Vector, horizon: f64, control_period: f64, substeps: usize) -> Result<Trajectory> {
    if !(control_period > 0.0) || substeps == 0 || !(horizon >= 0.0) {
        return Err(Error::InvalidArgument("need control_period > 0, substeps ≥ 1 and horizon ≥ 0".into()));
    }
    if x0.len() != sys.state_dim() {
        return Err(Error::Dimension(format!("x0 has {} entries, system state has {}", x0.len(), sys.state_dim())));
    }
    let intervals = ((horizon / control_period) - 1e-9).ceil().max(0.0) as usize;
    let mut traj = Trajectory { times: vec![0.0], states: vec![x0.clone()], inputs: Vec::with_capacity(intervals), h_values: None };
    let mut x = x0.clone();
    for k in 0..intervals {
        let tk = k as f64 * control_period;
        let len = (horizon - tk).min(control_period);
        let u = controller(&x, tk).map_err(|e| Error::Controller { step: k, time: tk, source: Box::new(e) })?;
        if u.len() != sys.input_dim() {
            return Err(Error::Dimension(format!("controller returned {} inputs, expected {}", u.len(), sys.input_dim())));
        }
        let pts = integrate_interval(sys, &x, &u, len, substeps, tk)?;
        for (j, p) in pts.into_iter().enumerate() {
            traj.times.push(tk + len * (j + 1) as f64 / substeps as f64);
            traj.states.push(p);
        }
        x = traj.states.last().expect("nonempty").clone();
        traj.inputs.push(u);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erosion_rounds_toward_the_interior() {
        // largest double not above the exact difference of the two doubles (rational arithmetic)
        let cases = [
            (5.4, 1.8, 3.6),
            (-5.4, -1.8, -3.6000000000000005),
            (0.3, 0.1, 0.19999999999999998),
            (1e16, 1.0, 9999999999999998.0),
            (7.0, 1e-17, 6.999999999999999),
            (-2.2, 0.7, -2.9000000000000004),
            (1.0, 0.25, 0.75),
        ];
        for (a, b, expected) in cases {
            assert_eq!(inward_difference(a, b), expected, "{a} − {b}");
        }
    }

    fn toy() -> (FnSystem, Cbf) {
        let sys = FnSystem::new(1, 1, |_x| Vector::zeros(1), |_x| Mat::from_element(1, 1, 1.0));
        let cbf = Cbf::new(FnBarrier::new(1, |x| 1.0 - x[0] * x[0]).with_gradient(|x| Vector::from_element(1, -2.0 * x[0])), ClassK::Linear(1.0));
        (sys, cbf)
    }

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    #[test]
    fn cbf_condition_examples() {
        let (sys, cbf) = toy();
        assert_eq!(eval_cbf_condition(&sys, &cbf, &v(0.0), &v(3.0)).unwrap(), 1.0);
        assert_eq!(eval_cbf_condition(&sys, &cbf, &v(1.0), &v(0.0)).unwrap(), 0.0);
        let c = eval_cbf_condition(&sys, &cbf, &v(0.5), &v(1.0)).unwrap();
        assert!((c + 0.25).abs() < 1e-15);
    }

    #[test]
    fn cbf_condition_matches_dh_dt_along_a_micro_step() {
        // ḣ + α(h) computed from a short RK4 step instead of the gradient
        let (sys, cbf) = toy();
        let x = v(0.5);
        let u = v(1.0);
        let dt = 1e-6;
        let xp = rk4_step(&sys, &x, &u, dt);
        let xm = rk4_step(&sys, &x, &u, -dt);
        let hdot = (cbf.h(&xp) - cbf.h(&xm)) / (2.0 * dt);
        let expected = hdot + cbf.alpha(cbf.h(&x));
        assert!((expected + 0.25).abs() < 1e-8);
    }

    #[test]
    fn non_finite_component_is_named() {
        let sys = FnSystem::new(1, 1, |_x| Vector::from_element(1, f64::NAN), |_x| Mat::from_element(1, 1, 1.0));
        let (_, cbf) = toy();
        match eval_cbf_condition(&sys, &cbf, &v(0.0), &v(0.0)) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "f"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rollout_examples() {
        let still = FnSystem::new(2, 1, |_x| Vector::zeros(2), |_x| Mat::zeros(2, 1));
        let c = Vector::from_vec(vec![0.3, -1.0]);
        let tr = zoh_rollout(&still, &mut |_x, _t| Ok(v(1.0)), &c, 1.0, 0.1, 4).unwrap();
        assert!(tr.states.iter().all(|s| s == &c));
        assert_eq!(tr.inputs.len(), 10);
        assert_eq!(tr.states.len(), 41);
        tr.validate().unwrap();

        let decay = FnSystem::new(1, 1, |x| -x, |_x| Mat::zeros(1, 1));
        let tr = zoh_rollout(&decay, &mut |_x, _t| Ok(v(0.0)), &v(1.0), 1.0, 1.0, 20).unwrap();
        assert!((tr.final_state().unwrap()[0] - (-1f64).exp()).abs() < 1e-6);

        let (int, _) = toy();
        let tr = zoh_rollout(&int, &mut |_x, _t| Ok(v(1.0)), &v(0.0), 0.5, 0.1, 3).unwrap();
        assert!((tr.final_state().unwrap()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn controller_failure_carries_the_step() {
        let (sys, _) = toy();
        let err = zoh_rollout(&sys, &mut |_x, t| if t > 0.25 { Err(Error::QpInfeasible("test".into())) } else { Ok(v(0.0)) }, &v(0.0), 1.0, 0.1, 1).unwrap_err();
        match err {
            Error::Controller { step, .. } => assert_eq!(step, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn divergence_is_detected() {
        let grow = FnSystem::new(1, 1, |x| x * 5.0, |_x| Mat::zeros(1, 1)).with_validity_box(Hyperrectangle::from_slices(&[-2.0], &[2.0]).unwrap());
        let err = zoh_rollout(&grow, &mut |_x, _t| Ok(v(0.0)), &v(1.0), 1.0, 0.1, 5).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.4]);
        let sys = LinearSystem { a: a.clone(), b: Mat::zeros(2, 1) };
        let x0 = Vector::from_vec(vec![1.0, 0.0]);
        let exact = (a * 2.0).exp() * &x0;
        let err = |sub: usize| {
            let tr = zoh_rollout(&sys, &mut |_x, _t| Ok(v(0.0)), &x0, 2.0, 2.0, sub).unwrap();
            (tr.final_state().unwrap() - &exact).norm()
        };
        let ratio = err(20) / err(40);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn boxes_and_polytopes() {
        let bx = Hyperrectangle::from_slices(&[-1.0, 0.0, 2.0], &[1.0, 0.0, 3.0]).unwrap();
        assert_eq!(bx.vertices().len(), 8);
        assert!(bx.contains(&Vector::from_vec(vec![0.5, 0.0, 2.5])));
        assert!(!bx.contains(&Vector::from_vec(vec![0.5, 0.1, 2.5])));
        assert_eq!(bx.grid(3).len(), 9);

        let u = Polytope::interval(-5.4, 5.4).unwrap();
        let mut vs: Vec<f64> = u.vertices().unwrap().iter().map(|v| v[0]).collect();
        vs.sort_by(f64::total_cmp);
        assert_eq!(vs, vec![-5.4, 5.4]);
        assert!(Polytope::interval(1.0, 0.0).is_err());
        let half = Polytope::new(Mat::from_row_slice(1, 1, &[1.0]), Vector::from_element(1, 1.0)).unwrap();
        assert!(!half.is_bounded().unwrap());
    }

    #[test]
    fn zonotope_of_square_image() {
        // K = [[1, 1], [1, −1]] applied to the unit box is a diamond |u1| + |u2| ≤ 2
        let g = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let z = Polytope::zonotope(&Vector::zeros(2), &g).unwrap();
        assert!(z.contains(&Vector::from_vec(vec![2.0, 0.0]), 1e-12));
        assert!(z.contains(&Vector::from_vec(vec![1.0, 1.0]), 1e-12));
        assert!(!z.contains(&Vector::from_vec(vec![1.2, 1.2]), 1e-12));
        assert!((z.support(&Vector::from_vec(vec![1.0, 1.0])).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_barrier_gradient_and_extent() {
        let p = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let qb = QuadraticBarrier::new(3, vec![0, 2], p, 1.0).unwrap();
        let x = Vector::from_vec(vec![0.2, 5.0, -0.4]);
        let fd = linalg::fd_gradient(&x, |y| qb.value(y));
        assert!((fd - qb.gradient(&x)).amax() < 1e-8);
        let ext = qb.extents().unwrap();
        // moving along coordinate 0 by its extent (with coordinate 2 chosen optimally) reaches h = 0
        let inv = qb.shape.clone().try_inverse().unwrap();
        let dir = inv.column(0) / inv[(0, 0)] * ext[0];
        let edge = Vector::from_vec(vec![dir[0], 0.0, dir[1]]);
        assert!(qb.value(&edge).abs() < 1e-12);
    }
}
