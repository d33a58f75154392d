//! Delayed within-host HIV dynamics with a CTL immune response.
//!
//! * [`model`]: rates, thresholds, equilibria and vector fields.
//! * [`dde`]: fixed-step method-of-steps RK4 integrator.
//! * [`stability`]: linearisation, characteristic functions and verdicts.
//! * [`control`]: treatment optimisation with state and control delays.
//! * [`scenario`]: config files, scenario runs and data export.

pub mod control;
pub mod dde;
pub mod model;
pub mod scenario;
pub mod stability;

pub use dde::{integrate, ControlGrid, GridConfig, HistorySpec, Trajectory};
pub use model::{equilibria, thresholds, Equilibrium, EquilibriumKind, ModelParams, StateTriple, ThresholdReport};
