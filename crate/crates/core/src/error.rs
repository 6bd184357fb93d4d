use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {component} at x = {state:?}")]
    NonFinite { component: &'static str, state: Vec<f64> },

    #[error("controller failed at step {step} (t = {time:.6} s): {source}")]
    Controller {
        step: usize,
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("state left the validity box at t = {time:.6} s: x = {state:?}")]
    Divergence { time: f64, state: Vec<f64> },

    #[error("safety filter infeasible at h(x) = {h:.6e} (x = {state:?}); the feasible input set has collapsed")]
    FilterInfeasible { state: Vec<f64>, h: f64 },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { solver: &'static str, iterations: usize, residual: f64 },

    #[error("QP infeasible: {0}")]
    QpInfeasible(String),

    #[error("QP unbounded")]
    QpUnbounded,

    #[error("{count} vertices exceed the enumeration cap of {cap}; decompose the disturbance set component-wise")]
    VertexCap { count: u128, cap: u128 },

    #[error("unbounded set: {0}")]
    Unbounded(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("tightening exceeds input authority")]
    TighteningExceedsAuthority,

    #[error("(A, B) is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("rank-deficient least-squares system ({rank} of {needed} monomials resolved); lower the degree")]
    RankDeficient { rank: usize, needed: usize },

    #[error("no trapping box found: {0}")]
    NoTrappingBox(String),

    #[error("{audit} audit failed at {failures} sample(s); worst value {worst:.3e} at x = {state:?}")]
    AuditFailed { audit: &'static str, failures: usize, worst: f64, state: Vec<f64> },

    #[error("tube breach at t = {time:.6} s: no nominal state keeps the measurement inside the tube")]
    TubeBreach { time: f64 },

    #[error("hard constraint rows infeasible: {0}")]
    HardRowInfeasible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
