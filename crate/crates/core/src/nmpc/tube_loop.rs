//! RTI with a tube-tightened CBF row: the nominal RTI problem is solved at the anchor
//! x̄ with CBF′ and U′ as hard rows, the plant receives ū + κ(x, x̄), and the anchor is
//! propagated and re-anchored after each period.

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::{integrate_interval, Cbf, ControlAffineSystem, Trajectory};
use crate::tube::{clip_to, reanchor, TubeSpec};

use super::{cbf_rti_step, NlpProblem, RtiReport, RtiState};

#[derive(Debug, Clone)]
pub struct TubeRtiController {
    pub problem: NlpProblem,
    pub spec: TubeSpec,
    pub cbf_prime: Cbf,
    pub state: RtiState,
    pub x_bar: Vector,
    pub period: f64,
    pub substeps: usize,
    u_bar: Option<Vector>,
}

#[derive(Debug, Clone)]
pub struct TubeRtiOutput {
    pub u_bar: Vector,
    pub kappa: Vector,
    pub u: Vector,
    pub report: RtiReport,
}

impl TubeRtiController {
    /// Seeds x̄(t₀) = x(t₀); requires h′(x₀) ≥ 0.
    pub fn new(problem: NlpProblem, spec: TubeSpec, cbf_prime: Cbf, x0: &Vector, period: f64, substeps: usize) -> Result<Self> {
        if cbf_prime.h(x0) < 0.0 {
            return Err(Error::InvalidArgument(format!("initial state lies outside the reduced safe set (h′ = {})", cbf_prime.h(x0))));
        }
        if !(period > 0.0) || substeps == 0 {
            return Err(Error::InvalidArgument("need period > 0 and substeps ≥ 1".into()));
        }
        let m = problem.input_dim();
        let state = RtiState::constant(&problem, x0, &Vector::zeros(m));
        Ok(Self { problem, spec, cbf_prime, state, x_bar: x0.clone(), period, substeps, u_bar: None })
    }

    /// Nominal RTI step at the anchor plus the auxiliary feedback for the measured state.
    pub fn control(&mut self, x: &Vector) -> Result<TubeRtiOutput> {
        let (u_bar, next, report) = cbf_rti_step(&self.problem, &self.state, &self.x_bar, &self.cbf_prime, &self.spec.u_tight, self.period)?;
        let kappa = self.spec.kappa(x, &self.x_bar);
        let u = clip_to(&(&u_bar + &kappa), &self.spec.u);
        let mut next = next;
        next.u_prev = u_bar.clone();
        self.state = next;
        self.u_bar = Some(u_bar.clone());
        Ok(TubeRtiOutput { u_bar, kappa, u, report })
    }

    /// Propagates x̄ under ū for one period and re-anchors it to the measurement.
    /// Returns whether re-anchoring moved x̄.
    pub fn advance(&mut self, sys: &dyn ControlAffineSystem, x_next: &Vector, time: f64) -> Result<bool> {
        let u_bar = self.u_bar.take().ok_or_else(|| Error::InvalidArgument("advance called before control".into()))?;
        let pts = integrate_interval(sys, &self.x_bar, &u_bar, self.period, self.substeps, time)?;
        let prop = pts.last().expect("substeps ≥ 1");
        let (x_bar, moved) = reanchor(&self.spec, &self.cbf_prime, prop, x_next, time + self.period)?;
        self.x_bar = x_bar;
        Ok(moved)
    }
}

#[derive(Debug, Clone)]
pub struct Algorithm2Report {
    pub trajectory: Trajectory,
    pub u_bar: Vec<Vector>,
    pub kappa: Vec<Vector>,
    pub min_h: f64,
    pub min_h_prime_anchor: f64,
    pub reanchors: usize,
    pub hard_row_infeasibilities: usize,
    /// First error that ended the run early, if any.
    pub failure: Option<String>,
}

impl Algorithm2Report {
    pub fn safe(&self) -> bool {
        self.failure.is_none() && self.hard_row_infeasibilities == 0 && self.min_h >= -1e-9
    }
}

/// Closed loop of the tube RTI controller on `sys` for `duration` seconds.
pub fn run_algorithm2(sys: &dyn ControlAffineSystem, ctrl: &mut TubeRtiController, cbf: &Cbf, x0: &Vector, duration: f64) -> Result<Algorithm2Report> {
    let period = ctrl.period;
    let steps = ((duration / period) - 1e-9).ceil().max(0.0) as usize;
    let mut traj = Trajectory { times: vec![0.0], states: vec![x0.clone()], inputs: Vec::with_capacity(steps), h_values: None };
    let mut rep = Algorithm2Report {
        trajectory: Trajectory { times: vec![], states: vec![], inputs: vec![], h_values: None },
        u_bar: vec![],
        kappa: vec![],
        min_h: cbf.h(x0),
        min_h_prime_anchor: ctrl.cbf_prime.h(&ctrl.x_bar),
        reanchors: 0,
        hard_row_infeasibilities: 0,
        failure: None,
    };
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * period;
        let out = match ctrl.control(&x) {
            Ok(o) => o,
            Err(e) => {
                if matches!(e, Error::HardRowInfeasible(_)) {
                    rep.hard_row_infeasibilities += 1;
                }
                rep.failure = Some(format!("t = {t:.3} s: {e}"));
                break;
            }
        };
        let pts = integrate_interval(sys, &x, &out.u, period, ctrl.substeps, t)?;
        for (j, p) in pts.iter().enumerate() {
            rep.min_h = rep.min_h.min(cbf.h(p));
            traj.times.push(t + period * (j + 1) as f64 / ctrl.substeps as f64);
            traj.states.push(p.clone());
        }
        x = pts.last().expect("substeps ≥ 1").clone();
        traj.inputs.push(out.u.clone());
        rep.u_bar.push(out.u_bar);
        rep.kappa.push(out.kappa);
        match ctrl.advance(sys, &x, t) {
            Ok(moved) => rep.reanchors += moved as usize,
            Err(e) => {
                rep.failure = Some(format!("t = {:.3} s: {e}", t + period));
                break;
            }
        }
        rep.min_h_prime_anchor = rep.min_h_prime_anchor.min(ctrl.cbf_prime.h(&ctrl.x_bar));
    }
    traj.attach_barrier(cbf);
    rep.trajectory = traj;
    Ok(rep)
}
