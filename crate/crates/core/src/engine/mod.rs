//! Simulation substrate: time grid, driver noise, and the regression
//! estimator of conditional expectations that every backward solver uses.

pub mod grid;
pub mod paths;
pub mod regression;

pub use grid::TimeGrid;
pub use paths::PathBundle;
pub use regression::{FeatureSet, ObservedBasis, RegressionPlan, estimate_conditional};
