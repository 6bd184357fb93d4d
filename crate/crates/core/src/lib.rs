//! Sampled-data safety for control-affine systems.
//!
//! A controller that only acts at sample instants can let a continuous-time
//! plant leave its safe set between samples. This crate bounds that inter-sample
//! drift and builds three safe controllers around it:
//!
//! * [`dbc`] — a QP safety filter enforcing a robust discrete barrier condition,
//! * [`tube`] — a tube around a nominal trajectory that tolerates ZOH error,
//! * [`nmpc`] — real-time-iteration NMPC with a hard barrier row per step.
//!
//! [`segway`] provides a wheeled inverted pendulum to exercise them and [`sim`]
//! wires everything into reproducible closed-loop scenarios.

pub mod bounds;
pub mod dbc;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nmpc;
pub mod opt;
pub mod segway;
pub mod sim;
pub mod tube;

pub use error::{Error, Result};
pub use model::{Cbf, ControlAffineSystem, Hyperrectangle, Polytope, Trajectory};
