//! Parallel inexact Levenberg-Marquardt for nearly separable nonlinear
//! least-squares problems, with a network-adjustment model and generator.

pub mod blocks;
pub mod cholesky;
pub mod error;
pub mod gen;
pub mod inner;
pub mod io;
pub mod model;
pub mod outer;
pub mod partition;
pub mod report;
pub mod runtime;
pub mod sparse;

pub use error::{Error, Result};
pub use model::{Axis, Measurement, Problem};
pub use outer::{classical_lm_solve, pilm_solve, SolveResult, SolverConfig, Status};
