//! Distributed convex optimization over communication graphs by explicit Runge–Kutta
//! discretization of a dual heavy-ball ODE.
//!
//! Each agent holds a strongly convex local objective and exchanges conjugate solutions
//! with its graph neighbors. The [`simulator`] runs the agent-local scheme in synchronous
//! rounds; [`baselines`] provides the comparison methods and [`harness`] the reference
//! optima, metrics and rate fits used to evaluate them.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod config;
pub mod dynamics;
mod error;
pub mod experiment;
pub mod graph;
pub mod harness;
pub mod integrator;
pub mod objectives;
pub mod oracle;
pub mod simulator;

pub use error::{Error, Result};
