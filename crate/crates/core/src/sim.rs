//! Scenario files, closed-loop runs on the Segway, traces and verdicts.
//!
//! A scenario is a TOML document with the sections `[plant]`, `[controller]`,
//! `[safety]`, `[reference]` and `[run]`; unknown keys are rejected. See the README
//! for the full schema.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::{build_disturbance_set, compute_budgets, BoundsConfig, DisturbanceSet};
use crate::dbc::safety_filter;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{integrate_interval, Cbf, ControlAffineSystem, Hyperrectangle, Polytope};
use crate::nmpc::{cbf_rti_step, discretize_rk4, full_nmpc_solve, rti_step, shift, NlpProblem, RtiState, TubeRtiController};
use crate::opt::lqr::lqr_gain;
use crate::segway::{self, Preset, Segway, SegwayParams, SAFETY_INDICES};
use crate::tube::{auxiliary_gain, build_reduced_cbf, estimate_tube, omega_from_tightening, AuditOptions, ReducedSafeSet, TubeEstimateOptions, TubeSpec};

/// Tolerance of the safe verdict on min h.
pub const SAFE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "lqr")]
    Lqr,
    #[serde(rename = "lqr+dbc")]
    LqrDbc,
    #[serde(rename = "full_nmpc")]
    FullNmpc,
    #[serde(rename = "rti")]
    Rti,
    #[serde(rename = "rti+cbf")]
    RtiCbf,
    #[serde(rename = "rti+tube_cbf")]
    RtiTubeCbf,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lqr => "lqr",
            Self::LqrDbc => "lqr+dbc",
            Self::FullNmpc => "full_nmpc",
            Self::Rti => "rti",
            Self::RtiCbf => "rti+cbf",
            Self::RtiTubeCbf => "rti+tube_cbf",
        }
    }

    fn is_nmpc(self) -> bool {
        matches!(self, Self::FullNmpc | Self::Rti | Self::RtiCbf | Self::RtiTubeCbf)
    }
}

/// Preset plus optional per-parameter overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub preset: String,
    pub body_mass: Option<f64>,
    pub wheel_mass: Option<f64>,
    pub body_inertia: Option<f64>,
    pub wheel_radius: Option<f64>,
    pub com_height: Option<f64>,
    pub torque_constant: Option<f64>,
    pub damping: Option<f64>,
    pub gravity: Option<f64>,
    pub volt_max: Option<f64>,
}

impl PlantConfig {
    pub fn params(&self) -> Result<SegwayParams> {
        let mut p = segway::preset_by_name(&self.preset)?.params;
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.body_mass, self.body_mass);
        set(&mut p.wheel_mass, self.wheel_mass);
        set(&mut p.body_inertia, self.body_inertia);
        set(&mut p.wheel_radius, self.wheel_radius);
        set(&mut p.com_height, self.com_height);
        set(&mut p.torque_constant, self.torque_constant);
        set(&mut p.damping, self.damping);
        set(&mut p.gravity, self.gravity);
        set(&mut p.volt_max, self.volt_max);
        p.validate()?;
        Ok(p)
    }
}

fn default_lqr_q() -> [f64; 4] {
    [100.0, 1.0, 1.0, 1.0]
}
fn default_q() -> [f64; 4] {
    [10.0, 1.0, 1.0, 0.1]
}
fn one() -> f64 {
    1.0
}
fn default_r_delta() -> f64 {
    0.01
}
fn default_r_input() -> f64 {
    0.01
}
fn default_slack_linear() -> f64 {
    1e3
}
fn default_slack_quadratic() -> f64 {
    1e4
}
fn default_sqp_iters() -> usize {
    50
}
fn default_sqp_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub rate_hz: f64,
    /// NMPC horizon length N.
    pub horizon: Option<usize>,
    /// NMPC shooting interval; defaults to the control period.
    pub shooting_interval: Option<f64>,
    #[serde(default = "default_lqr_q")]
    pub lqr_q: [f64; 4],
    #[serde(default = "one")]
    pub lqr_r: f64,
    /// NMPC stage weight on x − x_ref.
    #[serde(default = "default_q")]
    pub q: [f64; 4],
    /// NMPC weight on input increments.
    #[serde(default = "default_r_delta")]
    pub r_delta: f64,
    #[serde(default = "default_r_input")]
    pub r_input: f64,
    #[serde(default = "default_slack_linear")]
    pub slack_linear: f64,
    #[serde(default = "default_slack_quadratic")]
    pub slack_quadratic: f64,
    #[serde(default = "default_sqp_iters")]
    pub sqp_max_iters: usize,
    #[serde(default = "default_sqp_tol")]
    pub sqp_tol: f64,
}

fn default_tube_q() -> [f64; 3] {
    [1000.0, 1000.0, 0.01]
}
fn default_budget_box() -> f64 {
    1.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    /// Pitch extent of C (rad); defaults to the preset's.
    pub theta_max: Option<f64>,
    /// Linear class-K gain γ; defaults to the preset's.
    pub gamma: Option<f64>,
    /// Fraction of volt_max reserved for κ. Ignored when `omega` is given.
    pub tightening: Option<f64>,
    /// Explicit tube half-widths on (ṡ, θ, θ̇).
    pub omega: Option<[f64; 3]>,
    /// Estimate Ω by Monte Carlo instead (uses the run seed).
    #[serde(default)]
    pub estimate_tube: bool,
    #[serde(default = "default_tube_q")]
    pub tube_q: [f64; 3],
    #[serde(default = "one")]
    pub tube_r: f64,
    /// Drift budgets are taken over C's bounding box scaled by this factor.
    #[serde(default = "default_budget_box")]
    pub budget_box: f64,
    #[serde(default)]
    pub bounds: BoundsConfig,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            theta_max: None,
            gamma: None,
            tightening: None,
            omega: None,
            estimate_tube: false,
            tube_q: default_tube_q(),
            tube_r: 1.0,
            budget_box: default_budget_box(),
            bounds: BoundsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub time: f64,
    pub position: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default)]
    pub initial: f64,
    #[serde(default)]
    pub steps: Vec<ReferenceStep>,
}

impl ReferenceConfig {
    pub fn position(&self, t: f64) -> f64 {
        self.steps.iter().filter(|s| s.time <= t + 1e-12).last().map_or(self.initial, |s| s.position)
    }
}

fn default_substeps() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub duration: f64,
    /// RK4 substeps per control period (also the trace resolution).
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub initial_state: [f64; 4],
    #[serde(default)]
    pub seed: u64,
    /// Write measured solve times; off by default so traces are reproducible.
    #[serde(default)]
    pub record_timing: bool,
    /// Apply each input one period late.
    #[serde(default)]
    pub input_delay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub safety: SafetyConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    pub run: RunConfig,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.controller;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(c.rate_hz > 0.0 && c.rate_hz.is_finite()) {
            return bad("controller.rate_hz must be positive");
        }
        if !(self.run.duration > 0.0 && self.run.duration.is_finite()) {
            return bad("run.duration must be positive");
        }
        if self.run.substeps == 0 {
            return bad("run.substeps must be at least 1");
        }
        if c.kind.is_nmpc() && c.horizon.unwrap_or(0) == 0 {
            return bad("NMPC controllers need controller.horizon ≥ 1");
        }
        if let Some(ts) = c.shooting_interval {
            if !(ts > 0.0) {
                return bad("controller.shooting_interval must be positive");
            }
        }
        if let Some(f) = self.safety.tightening {
            if !(f > 0.0 && f < 1.0) {
                return bad("safety.tightening must lie in (0, 1)");
            }
        }
        if let Some(om) = self.safety.omega {
            if om.iter().any(|w| !(*w >= 0.0)) {
                return bad("safety.omega half-widths must be nonnegative");
            }
        }
        if self.run.initial_state.iter().any(|v| !v.is_finite()) {
            return bad("run.initial_state must be finite");
        }
        if self.reference.steps.iter().any(|s| !(s.time >= 0.0 && s.position.is_finite())) {
            return bad("reference steps need time ≥ 0 and a finite position");
        }
        self.plant.params()?;
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.controller.rate_hz
    }

    pub fn with_rate(&self, rate_hz: f64) -> Self {
        let mut sc = self.clone();
        sc.controller.rate_hz = rate_hz;
        sc
    }

    pub fn preset(&self) -> Result<Preset> {
        let mut pr = segway::preset_by_name(&self.plant.preset)?;
        pr.params = self.plant.params()?;
        if let Some(t) = self.safety.theta_max {
            pr.cbf.theta_max = t;
        }
        if let Some(g) = self.safety.gamma {
            pr.cbf.gamma = g;
        }
        Ok(pr)
    }
}

// ─── Stack construction ─────────────────────────────────────────────────────

/// Everything a run needs, built once per scenario.
pub struct Stack {
    pub sys: Arc<Segway>,
    pub preset: Preset,
    pub cbf: Cbf,
    pub u_set: Polytope,
    pub tube: Option<(TubeSpec, ReducedSafeSet)>,
    pub disturbance: Option<DisturbanceSet>,
}

pub fn build_stack(sc: &Scenario) -> Result<Stack> {
    let preset = sc.preset()?;
    let sys = Arc::new(Segway::new(preset.params)?);
    let cbf = segway::default_cbf(&preset.params, &preset.cbf)?;
    let vmax = preset.params.volt_max;
    let u_set = Polytope::interval(-vmax, vmax)?;
    let disturbance = if sc.controller.kind == ControllerKind::LqrDbc {
        let bx = segway::budget_box(&preset.params, &preset.cbf, sc.safety.budget_box)?;
        let budgets = compute_budgets(&*sys, &cbf, &bx, &u_set, &sc.safety.bounds)?;
        Some(build_disturbance_set(&budgets, 4, 1, sc.period())?)
    } else {
        None
    };
    let tube = if sc.controller.kind == ControllerKind::RtiTubeCbf { Some(build_tube(sc, &sys, &preset, &cbf, &u_set)?) } else { None };
    Ok(Stack { sys, preset, cbf, u_set, tube, disturbance })
}

/// K_aux by discrete LQR at the control period, Ω from the configured source, C′ by
/// P-norm shrinking, then the containment and viability audits.
pub fn build_tube(sc: &Scenario, sys: &Arc<Segway>, preset: &Preset, cbf: &Cbf, u_set: &Polytope) -> Result<(TubeSpec, ReducedSafeSet)> {
    let s = &sc.safety;
    let q = Mat::from_diagonal(&Vector::from_row_slice(&s.tube_q));
    let r = Mat::from_element(1, 1, s.tube_r);
    let k_aux = auxiliary_gain(&**sys, &SAFETY_INDICES, &q, &r, Some(sc.period()))?;
    let ext = segway::barrier(&preset.params, &preset.cbf)?.extents().ok_or_else(|| Error::Config("degenerate safe set".into()))?;
    let omega = if let Some(om) = s.omega {
        Hyperrectangle::symmetric(Vector::from_row_slice(&om))
    } else if s.estimate_tube {
        let seed_box = Hyperrectangle::symmetric(&ext * 0.05);
        let opts = TubeEstimateOptions { period: sc.period(), seed: sc.run.seed, ..TubeEstimateOptions::default() };
        estimate_tube(&**sys, &k_aux, &SAFETY_INDICES, &seed_box, &opts)?.omega
    } else {
        let frac = s.tightening.unwrap_or(1.0 / 3.0);
        omega_from_tightening(&k_aux, &ext, frac * preset.params.volt_max)?
    };
    let spec = TubeSpec::from_gain(k_aux, SAFETY_INDICES.to_vec(), u_set.clone(), omega)?;
    let cbf_prime = segway::reduced_cbf(&preset.params, &preset.cbf, &spec.omega)?;
    let audit_box = Hyperrectangle::from_slices(&[0.0, -ext[0], -ext[1], -ext[2]], &[0.0, ext[0], ext[1], ext[2]])?;
    let opts = AuditOptions { audit_box, interior: Vector::zeros(4), grid_per_dim: 9, tol: 1e-9 };
    let reduced = build_reduced_cbf(&**sys, cbf, cbf_prime, &spec, &opts)?;
    Ok((spec, reduced))
}

// ─── Controllers ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
struct StepOut {
    u: f64,
    u_nominal: f64,
    slack_norm: f64,
    qp_iters: usize,
    /// Filter or hard-row infeasibility (the step fell back).
    infeasible: bool,
    hard_row: bool,
    note: Option<String>,
}

trait Controller {
    fn control(&mut self, x: &Vector, reference: f64) -> StepOut;
    /// Called after the plant has advanced one period.
    fn observe(&mut self, _sys: &dyn ControlAffineSystem, _x_next: &Vector, _t: f64) -> Option<String> {
        None
    }
}

fn clamp(u: f64, vmax: f64) -> f64 {
    u.clamp(-vmax, vmax)
}

struct LqrCtl {
    k: Mat,
    vmax: f64,
}

impl LqrCtl {
    fn new(sc: &Scenario, params: &SegwayParams) -> Result<Self> {
        let (a, b) = segway::linearize_origin(params);
        let q = Mat::from_diagonal(&Vector::from_row_slice(&sc.controller.lqr_q));
        let k = lqr_gain(&a, &b, &q, &Mat::from_element(1, 1, sc.controller.lqr_r), false)?.k;
        Ok(Self { k, vmax: params.volt_max })
    }

    fn nominal(&self, x: &Vector, reference: f64) -> f64 {
        let mut e = x.clone();
        e[0] -= reference;
        clamp(-(&self.k * e)[0], self.vmax)
    }
}

impl Controller for LqrCtl {
    fn control(&mut self, x: &Vector, reference: f64) -> StepOut {
        let u = self.nominal(x, reference);
        StepOut { u, u_nominal: u, ..StepOut::default() }
    }
}

struct DbcCtl {
    lqr: LqrCtl,
    sys: Arc<Segway>,
    cbf: Cbf,
    w: DisturbanceSet,
    u_set: Polytope,
    prev: f64,
}

impl Controller for DbcCtl {
    fn control(&mut self, x: &Vector, reference: f64) -> StepOut {
        let un = self.lqr.nominal(x, reference);
        match safety_filter(&*self.sys, &self.cbf, &self.w, x, &Vector::from_element(1, un), &self.u_set) {
            Ok(u) => {
                self.prev = clamp(u[0], self.lqr.vmax);
                StepOut { u: self.prev, u_nominal: un, ..StepOut::default() }
            }
            // hold the previous input and flag the step
            Err(e) => StepOut { u: self.prev, u_nominal: un, infeasible: true, note: Some(e.to_string()), ..StepOut::default() },
        }
    }
}

#[derive(Clone, Copy)]
enum NmpcMode {
    Full { max_iters: usize, tol: f64 },
    Rti,
    RtiCbf,
}

struct NmpcCtl {
    p: NlpProblem,
    s: RtiState,
    mode: NmpcMode,
    period: f64,
    vmax: f64,
    cbf: Cbf,
    u_set: Polytope,
}

fn nlp(sc: &Scenario, sys: &Arc<Segway>, constraint: Cbf, vmax: f64) -> Result<NlpProblem> {
    let c = &sc.controller;
    let t_s = c.shooting_interval.unwrap_or(sc.period());
    let map = discretize_rk4(sys.clone(), t_s)?;
    let q = Mat::from_diagonal(&Vector::from_row_slice(&c.q));
    NlpProblem::new(map, c.horizon.unwrap_or(1), q, Mat::from_element(1, 1, c.r_delta), Mat::from_element(1, 1, c.r_input))?
        .with_dare_terminal(&Vector::zeros(4), &Vector::zeros(1))?
        .with_input_bounds(Vector::from_element(1, -vmax), Vector::from_element(1, vmax))
        .map(|p| p.with_state_constraint(constraint, c.slack_linear, c.slack_quadratic))
}

impl Controller for NmpcCtl {
    fn control(&mut self, x: &Vector, reference: f64) -> StepOut {
        self.p.reference[0] = reference;
        let fallback = |s: &RtiState| s.u_prev[0];
        let res = match self.mode {
            NmpcMode::Full { max_iters, tol } => full_nmpc_solve(&self.p, &self.s, x, max_iters, tol).map(|(u, v, r)| {
                let note = (!r.converged).then(|| format!("SQP stopped after {} iterations (step {:.2e})", r.iterations, r.step_norm));
                let slack = v.s.amax();
                let next = shift(&self.p, &v, self.period, &u);
                (u, next, slack, r.qp_iterations, note)
            }),
            NmpcMode::Rti => rti_step(&self.p, &self.s, x, self.period).map(|(u, n, r)| (u, n, r.slack_norm, r.qp_iterations, None)),
            NmpcMode::RtiCbf => cbf_rti_step(&self.p, &self.s, x, &self.cbf, &self.u_set, self.period).map(|(u, n, r)| (u, n, r.slack_norm, r.qp_iterations, None)),
        };
        match res {
            Ok((u, next, slack_norm, qp_iters, note)) => {
                self.s = next;
                let ua = clamp(u[0], self.vmax);
                StepOut { u: ua, u_nominal: u[0], slack_norm, qp_iters, note, ..StepOut::default() }
            }
            Err(e) => {
                let hard_row = matches!(e, Error::HardRowInfeasible(_));
                // without the barrier row the soft problem stays solvable; otherwise hold
                let alt = if hard_row { rti_step(&self.p, &self.s, x, self.period).ok() } else { None };
                let note = Some(e.to_string());
                match alt {
                    Some((u, n, r)) => {
                        self.s = n;
                        StepOut { u: clamp(u[0], self.vmax), u_nominal: u[0], slack_norm: r.slack_norm, qp_iters: r.qp_iterations, infeasible: true, hard_row, note }
                    }
                    None => {
                        let u = fallback(&self.s);
                        StepOut { u, u_nominal: u, infeasible: true, hard_row, note, ..StepOut::default() }
                    }
                }
            }
        }
    }
}

impl NmpcCtl {
    fn new(sc: &Scenario, st: &Stack, x0: &Vector) -> Result<Self> {
        let c = &sc.controller;
        let vmax = st.preset.params.volt_max;
        let p = nlp(sc, &st.sys, st.cbf.clone(), vmax)?;
        let mode = match c.kind {
            ControllerKind::FullNmpc => NmpcMode::Full { max_iters: c.sqp_max_iters, tol: c.sqp_tol },
            ControllerKind::Rti => NmpcMode::Rti,
            _ => NmpcMode::RtiCbf,
        };
        let s = RtiState::constant(&p, x0, &Vector::zeros(1));
        Ok(Self { p, s, mode, period: sc.period(), vmax, cbf: st.cbf.clone(), u_set: st.u_set.clone() })
    }
}

struct TubeCtl {
    inner: TubeRtiController,
    last_u: f64,
}

impl Controller for TubeCtl {
    fn control(&mut self, x: &Vector, reference: f64) -> StepOut {
        self.inner.problem.reference[0] = reference;
        match self.inner.control(x) {
            Ok(out) => {
                self.last_u = out.u[0];
                StepOut { u: out.u[0], u_nominal: out.u_bar[0], slack_norm: out.report.slack_norm, qp_iters: out.report.qp_iterations, ..StepOut::default() }
            }
            Err(e) => StepOut { u: self.last_u, u_nominal: self.last_u, infeasible: true, hard_row: matches!(e, Error::HardRowInfeasible(_)), note: Some(e.to_string()), ..StepOut::default() },
        }
    }

    fn observe(&mut self, sys: &dyn ControlAffineSystem, x_next: &Vector, t: f64) -> Option<String> {
        match self.inner.advance(sys, x_next, t) {
            Ok(_) => None,
            Err(e) => Some(e.to_string()),
        }
    }
}

fn build_controller(sc: &Scenario, st: &Stack, x0: &Vector) -> Result<Box<dyn Controller>> {
    let vmax = st.preset.params.volt_max;
    Ok(match sc.controller.kind {
        ControllerKind::Lqr => Box::new(LqrCtl::new(sc, &st.preset.params)?),
        ControllerKind::LqrDbc => Box::new(DbcCtl {
            lqr: LqrCtl::new(sc, &st.preset.params)?,
            sys: st.sys.clone(),
            cbf: st.cbf.clone(),
            w: st.disturbance.clone().expect("built for lqr+dbc"),
            u_set: st.u_set.clone(),
            prev: 0.0,
        }),
        ControllerKind::FullNmpc | ControllerKind::Rti | ControllerKind::RtiCbf => Box::new(NmpcCtl::new(sc, st, x0)?),
        ControllerKind::RtiTubeCbf => {
            let (spec, reduced) = st.tube.clone().expect("built for rti+tube_cbf");
            let p = nlp(sc, &st.sys, reduced.cbf_prime.clone(), vmax)?;
            let inner = TubeRtiController::new(p, spec, reduced.cbf_prime, x0, sc.period(), sc.run.substeps)?;
            Box::new(TubeCtl { inner, last_u: 0.0 })
        }
    })
}

// ─── Runs ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Safe,
    Unsafe,
    Infeasible,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Safe => "safe",
            Self::Unsafe => "unsafe",
            Self::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub s: f64,
    pub s_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub u_applied: f64,
    pub u_nominal: f64,
    pub h: f64,
    pub h_prime: Option<f64>,
    pub slack_norm: f64,
    pub qp_iters: usize,
    pub solve_time_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub controller: String,
    pub rate_hz: f64,
    pub steps: usize,
    pub min_h: f64,
    /// min h over the sampling instants only.
    pub min_h_sampled: f64,
    /// Trace rows with h < −SAFE_TOL.
    pub violations: usize,
    /// Steps whose filter or hard rows were infeasible (or whose tube re-anchoring failed).
    pub infeasibilities: usize,
    pub hard_row_infeasibilities: usize,
    pub first_infeasible_time: Option<f64>,
    pub max_abs_theta: f64,
    pub max_abs_u: f64,
    /// Nominal-input range of the tube controller (empty otherwise).
    pub max_abs_u_nominal: f64,
    pub mean_solve_time_us: f64,
    pub max_solve_time_us: u64,
    pub verdict: Verdict,
    /// Why the run ended early, if it did.
    pub failure: Option<String>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl RunReport {
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.trace {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Keeps the first few notes verbatim and counts the rest.
fn push_note(notes: &mut Vec<String>, dropped: &mut usize, note: String) {
    if notes.len() < 20 {
        notes.push(note);
    } else {
        *dropped += 1;
    }
}

pub fn run_scenario(sc: &Scenario) -> Result<RunReport> {
    sc.validate()?;
    let st = build_stack(sc)?;
    let x0 = Vector::from_row_slice(&sc.run.initial_state);
    let mut ctl = build_controller(sc, &st, &x0)?;
    let h_prime = st.tube.as_ref().map(|(_, r)| r.cbf_prime.clone());
    let period = sc.period();
    let subs = sc.run.substeps;
    let steps = ((sc.run.duration / period) - 1e-9).ceil().max(1.0) as usize;
    let mut rep = RunReport {
        controller: sc.controller.kind.name().to_string(),
        rate_hz: sc.controller.rate_hz,
        steps: 0,
        min_h: f64::INFINITY,
        min_h_sampled: f64::INFINITY,
        violations: 0,
        infeasibilities: 0,
        hard_row_infeasibilities: 0,
        first_infeasible_time: None,
        max_abs_theta: 0.0,
        max_abs_u: 0.0,
        max_abs_u_nominal: 0.0,
        mean_solve_time_us: 0.0,
        max_solve_time_us: 0,
        verdict: Verdict::Safe,
        failure: None,
        notes: vec![],
        trace: Vec::with_capacity(steps * subs + 1),
    };
    let mut dropped = 0;
    let mut x = x0;
    let mut pending = 0.0;
    let mut total_us = 0u64;
    for k in 0..steps {
        let t = k as f64 * period;
        let started = Instant::now();
        let out = ctl.control(&x, sc.reference.position(t));
        let us = if sc.run.record_timing { started.elapsed().as_micros() as u64 } else { 0 };
        total_us += us;
        rep.max_solve_time_us = rep.max_solve_time_us.max(us);
        if out.infeasible {
            rep.infeasibilities += 1;
            rep.hard_row_infeasibilities += out.hard_row as usize;
            rep.first_infeasible_time.get_or_insert(t);
        }
        if let Some(n) = out.note {
            push_note(&mut rep.notes, &mut dropped, format!("t = {t:.3} s: {n}"));
        }
        let u = if sc.run.input_delay { std::mem::replace(&mut pending, out.u) } else { out.u };
        rep.max_abs_u = rep.max_abs_u.max(u.abs());
        if sc.controller.kind == ControllerKind::RtiTubeCbf {
            rep.max_abs_u_nominal = rep.max_abs_u_nominal.max(out.u_nominal.abs());
        }
        let row = |tt: f64, x: &Vector| TraceRow {
            t: tt,
            s: x[0],
            s_dot: x[1],
            theta: x[2],
            theta_dot: x[3],
            u_applied: u,
            u_nominal: out.u_nominal,
            h: st.cbf.h(x),
            h_prime: h_prime.as_ref().map(|c| c.h(x)),
            slack_norm: out.slack_norm,
            qp_iters: out.qp_iters,
            solve_time_us: us,
        };
        rep.trace.push(row(t, &x));
        rep.min_h_sampled = rep.min_h_sampled.min(st.cbf.h(&x));
        rep.steps += 1;
        let pts = match integrate_interval(&*st.sys, &x, &Vector::from_element(1, u), period, subs, t) {
            Ok(p) => p,
            Err(e) => {
                rep.failure = Some(e.to_string());
                break;
            }
        };
        for (j, p) in pts.iter().enumerate().take(subs - 1) {
            rep.trace.push(row(t + period * (j + 1) as f64 / subs as f64, p));
        }
        x = pts.last().expect("substeps ≥ 1").clone();
        if k + 1 == steps {
            rep.trace.push(row((k + 1) as f64 * period, &x));
        }
        if let Some(err) = ctl.observe(&*st.sys, &x, t) {
            rep.infeasibilities += 1;
            rep.first_infeasible_time.get_or_insert(t + period);
            push_note(&mut rep.notes, &mut dropped, format!("t = {:.3} s: {err}", t + period));
        }
    }
    if dropped > 0 {
        rep.notes.push(format!("… {dropped} further notes omitted"));
    }
    for r in &rep.trace {
        rep.min_h = rep.min_h.min(r.h);
        rep.violations += (r.h < -SAFE_TOL) as usize;
        rep.max_abs_theta = rep.max_abs_theta.max(r.theta.abs());
    }
    if rep.min_h < -SAFE_TOL && rep.min_h_sampled >= -SAFE_TOL {
        rep.notes.push(format!("h ≥ 0 at every sampling instant; all {} violating substeps lie between samples (min h {:.3e})", rep.violations, rep.min_h));
    }
    rep.mean_solve_time_us = if rep.steps > 0 { total_us as f64 / rep.steps as f64 } else { 0.0 };
    rep.verdict = if rep.infeasibilities > 0 {
        Verdict::Infeasible
    } else if rep.min_h >= -SAFE_TOL && rep.failure.is_none() {
        Verdict::Safe
    } else {
        Verdict::Unsafe
    };
    Ok(rep)
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub reports: Vec<RunReport>,
    /// Smallest rate from which every higher swept rate is safe.
    pub min_safe_rate: Option<f64>,
    /// Whether verdicts switch from not-safe to safe at most once in rate order.
    pub monotone: bool,
}

/// One run per rate, in parallel threads; reports come back in rate order.
pub fn sweep_rates(sc: &Scenario, rates: &[f64]) -> Result<SweepSummary> {
    let mut sorted: Vec<f64> = rates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let reports: Vec<Result<RunReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sorted.iter().map(|&r| scope.spawn(move || run_scenario(&sc.with_rate(r)))).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("worker panicked".into())))).collect()
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let safe: Vec<bool> = reports.iter().map(|r| r.verdict == Verdict::Safe).collect();
    let switches = safe.windows(2).filter(|w| w[0] != w[1]).count();
    let monotone = switches == 0 || (switches == 1 && !safe[0]);
    let first_safe_suffix = (0..safe.len()).find(|&i| safe[i..].iter().all(|&s| s));
    let min_safe_rate = first_safe_suffix.map(|i| sorted[i]);
    Ok(SweepSummary { reports, min_safe_rate, monotone })
}

// ─── Audits ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct DbcSweepRow {
    pub rate_hz: f64,
    pub samples: usize,
    pub infeasible: usize,
    /// Smallest h among the infeasible samples.
    pub worst_h: Option<f64>,
}

/// Filter feasibility on states near the boundary of C (levels h ∈ {0, 0.05, 0.2} along
/// rays through a grid of C's bounding box), for each rate.
pub fn dbc_feasibility_sweep(sc: &Scenario, rates: &[f64]) -> Result<Vec<DbcSweepRow>> {
    let preset = sc.preset()?;
    let sys = Segway::new(preset.params)?;
    let cbf = segway::default_cbf(&preset.params, &preset.cbf)?;
    let vmax = preset.params.volt_max;
    let u_set = Polytope::interval(-vmax, vmax)?;
    let bx = segway::budget_box(&preset.params, &preset.cbf, sc.safety.budget_box)?;
    let budgets = compute_budgets(&sys, &cbf, &bx, &u_set, &sc.safety.bounds)?;
    let p = segway::cbf_shape(&preset.params, &preset.cbf)?;
    let mut states = Vec::new();
    for d in Hyperrectangle::symmetric(Vector::from_element(3, 1.0)).grid(5) {
        let r2 = d.dot(&(&p * &d));
        if r2 <= 0.0 {
            continue;
        }
        for level in [0.0, 0.05, 0.2] {
            let z = &d * ((1.0 - level) / r2).sqrt();
            states.push(Vector::from_row_slice(&[0.0, z[0], z[1], z[2]]));
        }
    }
    let mut out = Vec::new();
    for &rate in rates {
        let w = build_disturbance_set(&budgets, 4, 1, 1.0 / rate)?;
        let mut row = DbcSweepRow { rate_hz: rate, samples: states.len(), infeasible: 0, worst_h: None };
        for x in &states {
            match safety_filter(&sys, &cbf, &w, x, &Vector::zeros(1), &u_set) {
                Ok(_) => {}
                Err(Error::FilterInfeasible { h, .. }) => {
                    row.infeasible += 1;
                    row.worst_h = Some(row.worst_h.map_or(h, |w: f64| w.min(h)));
                }
                Err(e) => return Err(e),
            }
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum AuditReport {
    Tube {
        k_aux: Vec<f64>,
        omega: Vec<f64>,
        g: (f64, f64),
        u_tight: (f64, f64),
        containment_margin: f64,
        viability_margin: f64,
        samples: usize,
    },
    Dbc(Vec<DbcSweepRow>),
    /// Nothing to audit for this controller.
    None,
}

/// Audits without running: tube and reduced-set checks for tube scenarios, a boundary
/// feasibility sweep at the scenario rate for filter scenarios.
pub fn audit(sc: &Scenario) -> Result<AuditReport> {
    sc.validate()?;
    match sc.controller.kind {
        ControllerKind::RtiTubeCbf => {
            let preset = sc.preset()?;
            let sys = Arc::new(Segway::new(preset.params)?);
            let cbf = segway::default_cbf(&preset.params, &preset.cbf)?;
            let vmax = preset.params.volt_max;
            let (spec, red) = build_tube(sc, &sys, &preset, &cbf, &Polytope::interval(-vmax, vmax)?)?;
            let gb = spec.g.bounding_box()?;
            let ub = spec.u_tight.bounding_box()?;
            Ok(AuditReport::Tube {
                k_aux: spec.k_aux.iter().copied().collect(),
                omega: spec.omega.half_widths().iter().copied().collect(),
                g: (gb.lo[0], gb.hi[0]),
                u_tight: (ub.lo[0], ub.hi[0]),
                containment_margin: red.containment_margin,
                viability_margin: red.viability_margin,
                samples: red.samples,
            })
        }
        ControllerKind::LqrDbc => Ok(AuditReport::Dbc(dbc_feasibility_sweep(sc, &[sc.controller.rate_hz])?)),
        _ => Ok(AuditReport::None),
    }
}
