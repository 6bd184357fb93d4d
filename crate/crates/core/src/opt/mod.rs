//! Dense solvers: active-set QP, simplex LP, Riccati-based LQR and polynomial regression.

pub mod lp;
pub mod lqr;
pub mod polyfit;
pub mod qp;

pub use lp::{solve_lp, LpProblem, LpSolution, LpStatus, Sense};
pub use lqr::{lqr_gain, LqrGain};
pub use polyfit::{polyfit, PolyFit, Polynomial};
pub use qp::{solve_qp, solve_qp_with, QpOptions, QpProblem, QpSolution, QpStatus};
