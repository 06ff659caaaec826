//! Numerical laboratory for semi-linear stochastic differential equations
//! with delay: mild-solution integrators on the weighted segment space
//! `C_ν`, Girsanov reweighting, the Zvonkin regularizing transform, coupling
//! by change of measures, and Monte Carlo checks of the log-Harnack
//! inequality and the L²-gradient estimate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod coupling;
pub mod delay_measure;
pub mod error;
pub mod functional;
pub mod girsanov;
pub mod harnack;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod solver;
pub mod stats;
pub mod zvonkin;

pub use delay_measure::{DelayMeasure, MeasureKind, Segment};
pub use error::{Error, Result};
pub use model::{Dynamics, ModelSpec};
pub use solver::{Batch, SamplePath, Scheme, SolverConfig};
