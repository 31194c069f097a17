//! Non-Markovian stochastic Schrödinger equations with random adapted
//! coefficients and Ornstein-Uhlenbeck colored noise.
//!
//! The crate is organised bottom-up: [`algebra`] holds operator and
//! superoperator utilities, [`noise`] samples Wiener and OU paths,
//! [`coefficients`] turns paths into SSE coefficients, [`integrators`]
//! steps single trajectories, [`ensemble`] averages them and [`memory`]
//! solves the deterministic mean equations.

pub mod algebra;
pub mod coefficients;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod integrators;
pub mod memory;
pub mod noise;
pub mod table;

pub use error::{Error, Result};
pub use exec::Execution;
