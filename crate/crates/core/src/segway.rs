//! Planar mini-Segway: a wheeled inverted pendulum driven by a DC motor.
//!
//! State x = [s, ṡ, θ, θ̇] (wheel position, velocity, body pitch, pitch rate), input a
//! motor voltage. With generalized coordinates q = (s, θ) the Lagrangian gives
//!
//! ```text
//! M₁₁ s̈ + M₁₂(θ) θ̈ − M l θ̇² sin θ = τ / r
//! M₁₂(θ) s̈ + M₂₂ θ̈ − M g l sin θ   = −τ
//! ```
//!
//! with M₁₁ = M + m_w + I_w/r², M₁₂ = M l cos θ, M₂₂ = I_b + M l² and motor torque
//! τ = k_u u − c_d (ṡ/r − θ̇). The safety set lives on the sub-state z = [ṡ, θ, θ̇].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{Cbf, ClassK, ControlAffineSystem, Hyperrectangle, QuadraticBarrier};
use crate::opt::lqr::lqr_gain;

/// Coordinates of x the barrier acts on.
pub const SAFETY_INDICES: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegwayParams {
    /// kg
    pub body_mass: f64,
    /// kg
    pub wheel_mass: f64,
    /// kg·m², about the wheel axle
    pub body_inertia: f64,
    /// m
    pub wheel_radius: f64,
    /// m, axle to body center of mass
    pub com_height: f64,
    /// N·m/V
    pub torque_constant: f64,
    /// N·m·s, back-EMF and friction lumped together
    pub damping: f64,
    pub gravity: f64,
    /// V
    pub volt_max: f64,
}

/// Design knobs for the quadratic barrier: an LQR gain K_c (weights `q_gain`, R = 1)
/// stabilizes the sub-state, the Lyapunov equation of A − BK_c with `q_lyap` shapes the
/// ellipsoid, and the ellipsoid is scaled so its pitch extent is `theta_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbfDesign {
    pub q_gain: [f64; 3],
    pub q_lyap: [f64; 3],
    /// rad
    pub theta_max: f64,
    /// α(r) = γ r
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub params: SegwayParams,
    pub cbf: CbfDesign,
}

/// Desk-scale robot: light, short and strongly actuated.
pub fn fast() -> Preset {
    let e2 = (-2.0f64).exp();
    Preset {
        params: SegwayParams { body_mass: 0.4, wheel_mass: 0.04, body_inertia: 1.2e-3, wheel_radius: 0.03, com_height: 0.05, torque_constant: 0.04, damping: 5e-4, gravity: 9.81, volt_max: 5.4 },
        cbf: CbfDesign { q_gain: [e2, 1.0, e2], q_lyap: [e2, 1.0, 1.0], theta_max: 0.3, gamma: 5.0 },
    }
}

/// Heavier, taller and weaker: small Lipschitz constants, so the robust filter stays feasible.
pub fn slow() -> Preset {
    let l = 8.0;
    let m = 20.0;
    Preset {
        params: SegwayParams { body_mass: m, wheel_mass: 2.0, body_inertia: m * l * l / 3.0, wheel_radius: 0.25, com_height: l, torque_constant: 13.0, damping: 0.1, gravity: 9.81, volt_max: 5.4 },
        cbf: CbfDesign { q_gain: [7e-6, 0.0086, 3.3], q_lyap: [1.9e-6, 0.81, 1.0], theta_max: 0.3, gamma: 0.14 },
    }
}

pub fn presets() -> (Preset, Preset) {
    (fast(), slow())
}

pub fn preset_by_name(name: &str) -> Result<Preset> {
    match name {
        "fast" => Ok(fast()),
        "slow" => Ok(slow()),
        other => Err(Error::Config(format!("unknown plant preset '{other}' (expected 'fast' or 'slow')"))),
    }
}

impl SegwayParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("body_mass", self.body_mass),
            ("wheel_mass", self.wheel_mass),
            ("body_inertia", self.body_inertia),
            ("wheel_radius", self.wheel_radius),
            ("com_height", self.com_height),
            ("torque_constant", self.torque_constant),
            ("damping", self.damping),
            ("gravity", self.gravity),
            ("volt_max", self.volt_max),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("segway parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn wheel_inertia(&self) -> f64 {
        0.5 * self.wheel_mass * self.wheel_radius * self.wheel_radius
    }

    fn mass_matrix(&self, theta: f64) -> (f64, f64, f64) {
        let m11 = self.body_mass + self.wheel_mass + self.wheel_inertia() / (self.wheel_radius * self.wheel_radius);
        let m12 = self.body_mass * self.com_height * theta.cos();
        let m22 = self.body_inertia + self.body_mass * self.com_height * self.com_height;
        (m11, m12, m22)
    }

    /// Kinetic plus potential energy (zero potential at the axle height).
    pub fn energy(&self, x: &Vector) -> f64 {
        let (m11, m12, m22) = self.mass_matrix(x[2]);
        let (sd, td) = (x[1], x[3]);
        0.5 * (m11 * sd * sd + 2.0 * m12 * sd * td + m22 * td * td) + self.body_mass * self.gravity * self.com_height * x[2].cos()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Segway {
    pub params: SegwayParams,
}

impl Segway {
    pub fn new(params: SegwayParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// ẋ at a voltage clamped to ±volt_max (the actuator saturates physically).
    pub fn dynamics(&self, x: &Vector, u: f64) -> Vector {
        let v = self.params.volt_max;
        self.velocity(x, &Vector::from_element(1, u.clamp(-v, v)))
    }
}

impl ControlAffineSystem for Segway {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &Vector) -> Vector {
        let p = &self.params;
        let (sd, th, td) = (x[1], x[2], x[3]);
        let (m11, m12, m22) = p.mass_matrix(th);
        let det = m11 * m22 - m12 * m12;
        let tau_d = -p.damping * (sd / p.wheel_radius - td);
        let r1 = p.body_mass * p.com_height * td * td * th.sin() + tau_d / p.wheel_radius;
        let r2 = p.body_mass * p.gravity * p.com_height * th.sin() - tau_d;
        Vector::from_vec(vec![sd, (m22 * r1 - m12 * r2) / det, td, (m11 * r2 - m12 * r1) / det])
    }
    fn input_matrix(&self, x: &Vector) -> Mat {
        let p = &self.params;
        let (m11, m12, m22) = p.mass_matrix(x[2]);
        let det = m11 * m22 - m12 * m12;
        let (r1, r2) = (p.torque_constant / p.wheel_radius, -p.torque_constant);
        Mat::from_column_slice(4, 1, &[0.0, (m22 * r1 - m12 * r2) / det, 0.0, (m11 * r2 - m12 * r1) / det])
    }
    fn validity_box(&self) -> Option<Hyperrectangle> {
        let big = 1e4;
        let lim = std::f64::consts::FRAC_PI_2 - 1e-6;
        Hyperrectangle::from_slices(&[-big, -big, -lim, -big], &[big, big, lim, big]).ok()
    }
}

/// Analytic linearization at the upright equilibrium.
pub fn linearize_origin(params: &SegwayParams) -> (Mat, Mat) {
    let p = params;
    let (m11, m12, m22) = p.mass_matrix(0.0);
    let det = m11 * m22 - m12 * m12;
    let r = p.wheel_radius;
    let c = p.damping;
    // right-hand sides, linear in (ṡ, θ, θ̇): r1 = −c(ṡ/r − θ̇)/r, r2 = Mglθ + c(ṡ/r − θ̇)
    let r1 = [-c / (r * r), 0.0, c / r];
    let r2 = [c / r, p.body_mass * p.gravity * p.com_height, -c];
    let mut a = Mat::zeros(4, 4);
    a[(0, 1)] = 1.0;
    a[(2, 3)] = 1.0;
    for (k, col) in [1usize, 2, 3].into_iter().enumerate() {
        a[(1, col)] = (m22 * r1[k] - m12 * r2[k]) / det;
        a[(3, col)] = (m11 * r2[k] - m12 * r1[k]) / det;
    }
    let b = Segway { params: *p }.input_matrix(&Vector::zeros(4));
    (a, b)
}

/// (A, B) restricted to the safety sub-state [ṡ, θ, θ̇].
pub fn sub_linearization(params: &SegwayParams) -> (Mat, Mat) {
    let (a, b) = linearize_origin(params);
    (a.view((1, 1), (3, 3)).into_owned(), b.rows(1, 3).into_owned())
}

/// Shape matrix P (h = 1 − zᵀPz) of the designed ellipsoid on z = [ṡ, θ, θ̇].
pub fn cbf_shape(params: &SegwayParams, design: &CbfDesign) -> Result<Mat> {
    if !(design.theta_max > 0.0 && design.gamma > 0.0) {
        return Err(Error::Config("theta_max and gamma must be positive".into()));
    }
    let (a3, b3) = sub_linearization(params);
    let kc = lqr_gain(&a3, &b3, &Mat::from_diagonal(&Vector::from_row_slice(&design.q_gain)), &Mat::identity(1, 1), false)?.k;
    let acl = &a3 - &b3 * &kc;
    let p = linalg::lyapunov_continuous(&acl, &Mat::from_diagonal(&Vector::from_row_slice(&design.q_lyap)))?;
    let pinv = p.clone().try_inverse().ok_or_else(|| Error::Config("degenerate barrier design".into()))?;
    let c = design.theta_max * design.theta_max / pinv[(1, 1)];
    Ok(linalg::symmetrize(&(p / c)))
}

pub fn barrier(params: &SegwayParams, design: &CbfDesign) -> Result<QuadraticBarrier> {
    QuadraticBarrier::new(4, SAFETY_INDICES.to_vec(), cbf_shape(params, design)?, 1.0)
}

/// The safe set C: h(x) = 1 − zᵀPz with pitch extent theta_max.
pub fn default_cbf(params: &SegwayParams, design: &CbfDesign) -> Result<Cbf> {
    Ok(Cbf::new(barrier(params, design)?, ClassK::Linear(design.gamma)))
}

/// C′ = {1 − zᵀ(P/ρ²)z ≥ 0} with ρ = 1 − max over Ω's vertices of ‖v‖_P; the triangle
/// inequality in the P-norm gives C′ ⊕ Ω ⊆ C.
pub fn reduced_cbf(params: &SegwayParams, design: &CbfDesign, omega: &Hyperrectangle) -> Result<Cbf> {
    let p = cbf_shape(params, design)?;
    if omega.dim() != SAFETY_INDICES.len() {
        return Err(Error::Dimension(format!("tube box has {} coordinates, expected {}", omega.dim(), SAFETY_INDICES.len())));
    }
    let reach = omega.vertices().iter().map(|v| v.dot(&(&p * v)).max(0.0).sqrt()).fold(0.0, f64::max);
    let rho = 1.0 - reach;
    if !(rho > 0.0) {
        return Err(Error::Config(format!("tube reaches {reach:.3} of the safe set's P-radius; nothing is left for C′")));
    }
    let shape = linalg::symmetrize(&(p / (rho * rho)));
    Ok(Cbf::new(QuadraticBarrier::new(4, SAFETY_INDICES.to_vec(), shape, 1.0)?, ClassK::Linear(design.gamma)))
}

/// Box around C used for drift budgets: the ellipsoid's bounding box, inflated, with the
/// position pinned (nothing depends on s).
pub fn budget_box(params: &SegwayParams, design: &CbfDesign, inflation: f64) -> Result<Hyperrectangle> {
    let ext = barrier(params, design)?.extents().ok_or_else(|| Error::Config("degenerate barrier".into()))?;
    let e = ext * inflation;
    Hyperrectangle::from_slices(&[0.0, -e[0], -e[1], -e[2]], &[0.0, e[0], e[1], e[2]])
}
