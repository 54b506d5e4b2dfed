//! Numerical solvers for two-player stochastic differential games whose
//! state dynamics carry a pointwise delay, whose backward (cost-recursion)
//! dynamics anticipate their own future values, and whose players only
//! observe one of the two driving Brownian motions.
//!
//! The crate is organized bottom-up:
//!
//! * [`engine`] — time grid with exact delay alignment, paired Brownian
//!   increment sampling, and regression-based conditional expectations.
//! * [`forward`] — Euler scheme for delayed forward equations, plus an
//!   exact reference solution for the linear no-delay case.
//! * [`backward`] — regression Monte Carlo for backward equations, the
//!   interval recursion for anticipated backward equations, and a
//!   deterministic delayed-ODE solver used as an oracle.
//! * [`model`] — the coupled forward-backward model and cost interfaces
//!   plus concrete linear-quadratic instances.
//! * [`game`] — Hamiltonians, adjoint systems, cost evaluation, and the
//!   verification battery (stationarity, duality, best-response checks).
//! * [`lq`] — the linear-quadratic specialization under partial
//!   observation: filtered systems, equilibrium feedback, fixed-point
//!   solver, and the aggregated single-system cross-check.
//! * [`pension`] — a two-member pension fund with delayed surplus
//!   feedback: closed-form filtered adjoints, equilibrium consumption,
//!   and a recursion-measure risk evaluation.
//! * [`config`] / [`report`] — serialized run specifications and results
//!   for the command line interface.

pub mod coeff;
pub mod config;
pub mod engine;
pub mod error;
pub mod forward;
pub mod game;
pub mod lq;
pub mod model;
pub mod pension;
pub mod report;
pub mod trajectory;
pub mod backward;

pub use engine::{FeatureSet, ObservedBasis, PathBundle, TimeGrid};
pub use error::{Error, Result};
pub use trajectory::Trajectory;
