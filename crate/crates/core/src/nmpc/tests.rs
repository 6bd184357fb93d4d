use std::sync::Arc;

use super::*;
use crate::linalg::fd_jacobian;
use crate::model::{ClassK, FnBarrier, FnSystem, LinearSystem};
use crate::segway::{fast, Segway};

fn lti() -> LinearSystem {
    LinearSystem { a: Mat::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -0.5]), b: Mat::from_row_slice(2, 1, &[0.0, 1.0]) }
}

fn integrator() -> Arc<dyn ControlAffineSystem> {
    Arc::new(LinearSystem { a: Mat::zeros(1, 1), b: Mat::from_element(1, 1, 1.0) })
}

fn disk(c: f64) -> Cbf {
    Cbf::new(FnBarrier::new(1, move |x| c - x[0] * x[0]).with_gradient(|x| Vector::from_element(1, -2.0 * x[0])), ClassK::Linear(1.0))
}

fn lti_problem(horizon: usize) -> NlpProblem {
    let map = discretize_rk4(Arc::new(lti()), 0.05).unwrap();
    NlpProblem::new(map, horizon, Mat::from_diagonal(&Vector::from_vec(vec![10.0, 1.0])), Mat::zeros(1, 1), Mat::identity(1, 1) * 0.1)
        .unwrap()
        .with_dare_terminal(&Vector::zeros(2), &Vector::zeros(1))
        .unwrap()
}

#[test]
fn rk4_of_zero_dynamics_is_identity() {
    let sys = Arc::new(FnSystem::new(2, 1, |_| Vector::zeros(2), |_| Mat::zeros(2, 1)));
    let map = discretize_rk4(sys, 0.1).unwrap();
    let x = Vector::from_vec(vec![0.3, -1.2]);
    let (y, a, b) = map.eval_with_jacobians(&x, &Vector::from_element(1, 4.0));
    assert_eq!(y, x);
    assert_eq!(a, Mat::identity(2, 2));
    assert_eq!(b, Mat::zeros(2, 1));
}

#[test]
fn rk4_matches_exponential_decay() {
    let sys = Arc::new(LinearSystem { a: Mat::from_element(1, 1, -1.0), b: Mat::zeros(1, 1) });
    let map = discretize_rk4(sys, 0.07).unwrap();
    let y = map.eval(&Vector::from_element(1, 1.0), &Vector::zeros(1));
    assert!((y[0] - (-0.07f64).exp()).abs() < 1e-7);
}

#[test]
fn rk4_jacobians_match_finite_differences() {
    let map = discretize_rk4(Arc::new(Segway::new(fast().params).unwrap()), 0.01).unwrap();
    for (x, u) in [([0.1, -0.4, 0.2, 1.5], 2.0), ([-0.7, 0.9, -0.25, -3.0], -4.5), ([0.0, 0.0, 0.05, 0.0], 0.0)] {
        let x = Vector::from_row_slice(&x);
        let u = Vector::from_element(1, u);
        let (_, a, b) = map.eval_with_jacobians(&x, &u);
        let a_fd = fd_jacobian(&x, |y: &Vector| map.eval(y, &u));
        let b_fd = fd_jacobian(&u, |v: &Vector| map.eval(&x, v));
        assert!((&a - &a_fd).amax() <= 1e-5 * a_fd.amax().max(1.0), "{a} vs {a_fd}");
        assert!((&b - &b_fd).amax() <= 1e-5 * b_fd.amax().max(1.0), "{b} vs {b_fd}");
    }
}

/// Finite-horizon Riccati recursion on the fourth-order Taylor discretization.
fn riccati_u0(p: &NlpProblem, a: &Mat, b: &Mat, h: f64, x: &Vector) -> Vector {
    let n = a.nrows();
    let eye = Mat::identity(n, n);
    let a2 = a * a;
    let a3 = &a2 * a;
    let ad = &eye + a * h + &a2 * (h * h / 2.0) + &a3 * (h.powi(3) / 6.0) + &a3 * a * (h.powi(4) / 24.0);
    let bd = (&eye * h + a * (h * h / 2.0) + &a2 * (h.powi(3) / 6.0) + &a3 * (h.powi(4) / 24.0)) * b;
    let mut pk = p.terminal.clone();
    let mut k0 = Mat::zeros(1, n);
    for k in (0..p.horizon).rev() {
        let s = &p.r_input + bd.transpose() * &pk * &bd;
        let kk = s.try_inverse().unwrap() * bd.transpose() * &pk * &ad;
        let qk = if k == 0 { Mat::zeros(n, n) } else { p.q.clone() };
        pk = qk + ad.transpose() * &pk * (&ad - &bd * &kk);
        k0 = kk;
    }
    -(k0 * x)
}

#[test]
fn full_solve_matches_riccati_recursion() {
    let p = lti_problem(12);
    let x = Vector::from_vec(vec![0.8, -0.3]);
    let s0 = RtiState::constant(&p, &Vector::zeros(2), &Vector::zeros(1));
    let (u0, _, rep) = full_nmpc_solve(&p, &s0, &x, 10, 1e-10).unwrap();
    assert!(rep.converged);
    let sys = lti();
    let oracle = riccati_u0(&p, &sys.a, &sys.b, 0.05, &x);
    assert!((u0[0] - oracle[0]).abs() < 1e-6, "{} vs {}", u0[0], oracle[0]);
}

#[test]
fn converged_iterate_is_a_fixed_point() {
    let p = lti_problem(10);
    let x = Vector::from_vec(vec![0.5, 0.1]);
    let s0 = RtiState::constant(&p, &x, &Vector::zeros(1));
    let (_, star, _) = full_nmpc_solve(&p, &s0, &x, 20, 1e-12).unwrap();
    let (_, rep) = rti_iterate(&p, &star, &x, None).unwrap();
    assert!(rep.step_norm <= 1e-6);
}

#[test]
fn repeated_rti_reaches_the_sqp_solution() {
    let map = discretize_rk4(Arc::new(lti()), 0.05).unwrap();
    let p = NlpProblem::new(map, 15, Mat::identity(2, 2) * 5.0, Mat::identity(1, 1) * 0.5, Mat::identity(1, 1) * 0.1)
        .unwrap()
        .with_input_bounds(Vector::from_element(1, -2.0), Vector::from_element(1, 2.0))
        .unwrap()
        .with_dare_terminal(&Vector::zeros(2), &Vector::zeros(1))
        .unwrap();
    let x = Vector::from_vec(vec![1.5, 0.0]);
    let s0 = RtiState::constant(&p, &Vector::zeros(2), &Vector::zeros(1));
    let (_, star, rep) = full_nmpc_solve(&p, &s0, &x, 50, 1e-10).unwrap();
    assert!(rep.converged);
    let mut cur = s0;
    for _ in 0..20 {
        cur = rti_iterate(&p, &cur, &x, None).unwrap().0;
    }
    assert!((cur.stack() - star.stack()).amax() <= 1e-6);
}

#[test]
fn segway_at_rest_stays_at_rest() {
    let sys = Arc::new(Segway::new(fast().params).unwrap());
    let map = discretize_rk4(sys, 0.03).unwrap();
    let p = NlpProblem::new(map, 15, Mat::identity(4, 4), Mat::identity(1, 1), Mat::identity(1, 1)).unwrap().with_dare_terminal(&Vector::zeros(4), &Vector::zeros(1)).unwrap();
    let s0 = RtiState::constant(&p, &Vector::zeros(4), &Vector::zeros(1));
    let (u0, _, _) = rti_step(&p, &s0, &Vector::zeros(4), 0.03).unwrap();
    assert!(u0[0].abs() < 1e-12);
}

#[test]
fn selectors_round_trip() {
    let p = lti_problem(4).with_state_constraint(Cbf::new(FnBarrier::new(2, |x| 1.0 - x[0]), ClassK::Linear(1.0)), 1.0, 1.0);
    let mut s = RtiState::constant(&p, &Vector::zeros(2), &Vector::zeros(1));
    for (k, x) in s.x.iter_mut().enumerate() {
        *x = Vector::from_vec(vec![k as f64, -(k as f64)]);
    }
    for (k, u) in s.u.iter_mut().enumerate() {
        u[0] = 10.0 + k as f64;
    }
    s.s = Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    let v = s.stack();
    assert_eq!(v.len(), 5 * 2 + 4 + 4);
    assert_eq!(RtiState::unstack(&p, &v, &s).unwrap(), s);
    assert_eq!(xi_x0(&p, &v), s.x[0]);
    assert_eq!(xi_u0(&p, &v), s.u[0]);
}

#[test]
fn shift_by_one_interval_drops_the_first_stage() {
    let p = lti_problem(3);
    let mut s = RtiState::constant(&p, &Vector::zeros(2), &Vector::zeros(1));
    for k in 0..=3 {
        s.x[k] = Vector::from_vec(vec![k as f64, 0.0]);
    }
    for k in 0..3 {
        s.u[k][0] = k as f64;
    }
    let t = shift(&p, &s, 0.05, &Vector::from_element(1, 7.0));
    assert_eq!(t.x.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 3.0]);
    assert_eq!(t.u.iter().map(|u| u[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 2.0]);
    assert_eq!(t.u_prev[0], 7.0);
}

#[test]
fn gauss_newton_hessian_is_psd() {
    let sys = Arc::new(Segway::new(fast().params).unwrap());
    let map = discretize_rk4(sys, 0.01).unwrap();
    let preset = fast();
    let cbf = crate::segway::default_cbf(&preset.params, &preset.cbf).unwrap();
    let p = NlpProblem::new(map, 15, Mat::identity(4, 4), Mat::identity(1, 1) * 0.1, Mat::identity(1, 1) * 0.01).unwrap().with_state_constraint(cbf, 1e3, 1e4);
    let x = Vector::from_vec(vec![0.2, 0.1, 0.05, 0.3]);
    let s = RtiState::constant(&p, &x, &Vector::from_element(1, 0.5));
    let cq = build_rti_qp(&p, &s, &x, None).unwrap();
    assert!(crate::linalg::min_sym_eigenvalue(&cq.qp.h) >= -1e-10);
}

fn integrator_problem(reference: f64) -> NlpProblem {
    let map = discretize_rk4(integrator(), 0.01).unwrap();
    let mut p =
        NlpProblem::new(map, 10, Mat::identity(1, 1), Mat::zeros(1, 1), Mat::identity(1, 1) * 1e-4).unwrap().with_input_bounds(Vector::from_element(1, -5.4), Vector::from_element(1, 5.4)).unwrap();
    p.reference = Vector::from_element(1, reference);
    p
}

#[test]
fn slacks_vanish_when_the_constraint_can_be_met() {
    let p = integrator_problem(0.5).with_state_constraint(disk(1.0), 10.0, 10.0);
    let s = RtiState::constant(&p, &Vector::zeros(1), &Vector::zeros(1));
    let (next, rep) = rti_iterate(&p, &s, &Vector::zeros(1), None).unwrap();
    assert_eq!(rep.slack_norm, 0.0);
    assert!(next.x.iter().all(|x| x[0].abs() < 1.0));
}

#[test]
fn slacks_absorb_an_infeasible_state_constraint() {
    // starting at 3 with |u| ≤ 5.4 the first predicted states cannot re-enter [−1, 1]
    let p = integrator_problem(0.0).with_state_constraint(disk(1.0), 10.0, 10.0);
    let x = Vector::from_element(1, 3.0);
    let s = RtiState::constant(&p, &x, &Vector::zeros(1));
    let (next, rep) = rti_iterate(&p, &s, &x, None).unwrap();
    assert!(rep.slack_norm > 0.0);
    assert!(next.mu.iter().all(|&m| m >= -1e-12));
}

#[test]
fn tightened_input_bound_is_met_exactly() {
    let p = integrator_problem(100.0);
    let s = RtiState::constant(&p, &Vector::zeros(1), &Vector::zeros(1));
    let ut = Polytope::interval(-3.6, 3.6).unwrap();
    let (u0, _, rep) = cbf_rti_step(&p, &s, &Vector::zeros(1), &disk(1e6), &ut, 0.01).unwrap();
    assert_eq!(u0[0], 3.6);
    assert!(rep.hard_active);
}

#[test]
fn inactive_barrier_row_changes_nothing() {
    let p = integrator_problem(0.12);
    let s = RtiState::constant(&p, &Vector::zeros(1), &Vector::zeros(1));
    let x = Vector::from_element(1, 0.1);
    let ut = Polytope::interval(-10.0, 10.0).unwrap();
    let (u_plain, s_plain, _) = rti_step(&p, &s, &x, 0.01).unwrap();
    let (u_cbf, s_cbf, rep) = cbf_rti_step(&p, &s, &x, &disk(1.0), &ut, 0.01).unwrap();
    assert!(!rep.hard_active);
    assert!((u_plain[0] - u_cbf[0]).abs() <= 1e-8);
    assert!((s_plain.stack() - s_cbf.stack()).amax() <= 1e-8);
}

#[test]
fn active_barrier_row_holds_with_equality() {
    // at x = 0.9 the condition −1.8u + 0.19 ≥ 0 caps u at 0.19/1.8
    let p = integrator_problem(5.0);
    let s = RtiState::constant(&p, &Vector::zeros(1), &Vector::zeros(1));
    let x = Vector::from_element(1, 0.9);
    let ut = Polytope::interval(-5.4, 5.4).unwrap();
    let cbf = disk(1.0);
    let (u0, _, rep) = cbf_rti_step(&p, &s, &x, &cbf, &ut, 0.01).unwrap();
    let cond = crate::model::eval_cbf_condition(&*p.dynamics.sys, &cbf, &x, &u0).unwrap();
    assert!(cond.abs() <= 1e-6, "{cond}");
    assert!((u0[0] - 0.19 / 1.8).abs() < 1e-9);
    assert!(rep.hard_multipliers[0] > 0.0);
    assert!(rep.hard_multipliers.iter().all(|&m| m >= 0.0));
}

#[test]
fn conflicting_hard_rows_are_reported() {
    let p = integrator_problem(5.0);
    let s = RtiState::constant(&p, &Vector::zeros(1), &Vector::zeros(1));
    let x = Vector::from_element(1, 0.9);
    let ut = Polytope::interval(0.5, 1.0).unwrap();
    let err = cbf_rti_step(&p, &s, &x, &disk(1.0), &ut, 0.01).unwrap_err();
    assert!(matches!(err, Error::HardRowInfeasible(_)));
}
