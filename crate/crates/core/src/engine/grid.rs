//! Uniform time grid with exact delay alignment.
//!
//! Every solver in this crate works on a uniform partition of `[0, T]`
//! with step `h = T / n_steps`. Delayed reads `x(t - delta)` and
//! anticipated reads `y(t + delta)` are only well defined on the grid when
//! the delay is an exact multiple of the step, so construction rejects any
//! `delta` that does not align; there is no interpolation anywhere.
//!
//! Grid indices are signed: index `i` corresponds to time `i * h`, with
//! `i in [-delay_steps, n_steps + delay_steps]` covering the extensions
//! `[-delta, 0)` (initial paths) and `(T, T + delta]` (terminal paths).

use crate::error::{Error, Result};

/// Relative tolerance for deciding that `delta / h` is an integer.
const ALIGNMENT_REL_TOL: f64 = 1e-9;

/// Uniform partition of `[0, T]` extended by one delay length on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_horizon: f64,
    delay: f64,
    n_steps: usize,
    delay_steps: usize,
    h: f64,
}

impl TimeGrid {
    /// Builds a grid over `[0, t_horizon]` with `n_steps` uniform steps and
    /// the given delay.
    ///
    /// Fails when the horizon or step count is not positive, the delay is
    /// negative or exceeds the horizon, or the delay is not an integer
    /// multiple of the step within a tight relative tolerance.
    pub fn new(t_horizon: f64, delay: f64, n_steps: usize) -> Result<Self> {
        let mut violations = Vec::new();
        if !(t_horizon.is_finite() && t_horizon > 0.0) {
            violations.push(format!("t_horizon must be positive and finite, got {t_horizon}"));
        }
        if n_steps == 0 {
            violations.push("n_steps must be at least 1".to_string());
        }
        if !(delay.is_finite() && delay >= 0.0) {
            violations.push(format!("delay must be nonnegative and finite, got {delay}"));
        }
        if delay > t_horizon {
            violations.push(format!(
                "delay {delay} exceeds the horizon {t_horizon}"
            ));
        }
        if !violations.is_empty() {
            return Err(Error::Grid(violations.join("; ")));
        }

        let h = t_horizon / n_steps as f64;
        let ratio = delay / h;
        let delay_steps = ratio.round();
        if (ratio - delay_steps).abs() > ALIGNMENT_REL_TOL * ratio.max(1.0) {
            return Err(Error::Grid(format!(
                "delay {delay} is not an integer multiple of the step {h} \
                 (delay/h = {ratio}); choose n_steps so the delay lands on the grid"
            )));
        }

        Ok(TimeGrid {
            t_horizon,
            delay,
            n_steps,
            delay_steps: delay_steps as usize,
            h,
        })
    }

    pub fn t_horizon(&self) -> f64 {
        self.t_horizon
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid steps in one delay length.
    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    /// Step size `T / n_steps`.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Time at a (possibly negative) grid index.
    pub fn t(&self, idx: isize) -> f64 {
        idx as f64 * self.h
    }

    /// First index of the extended grid, `-delay_steps`.
    pub fn first_idx(&self) -> isize {
        -(self.delay_steps as isize)
    }

    /// Last index of the extended grid, `n_steps + delay_steps`.
    pub fn last_idx(&self) -> isize {
        (self.n_steps + self.delay_steps) as isize
    }

    /// Grid times on `[0, T]` only, `n_steps + 1` values.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps as isize).map(|i| self.t(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_delay_resolves_to_integer_steps() {
        let grid = TimeGrid::new(1.0, 0.25, 8).unwrap();
        assert_eq!(grid.h(), 0.125);
        assert_eq!(grid.delay_steps(), 2);
        assert_eq!(grid.first_idx(), -2);
        assert_eq!(grid.last_idx(), 10);
        assert_eq!(grid.times().len(), 9);
    }

    #[test]
    fn misaligned_delay_is_rejected() {
        let err = TimeGrid::new(1.0, 0.3, 8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not an integer multiple"), "message: {msg}");
    }

    #[test]
    fn zero_delay_is_allowed() {
        let grid = TimeGrid::new(2.0, 0.0, 10).unwrap();
        assert_eq!(grid.delay_steps(), 0);
        assert_eq!(grid.first_idx(), 0);
        assert_eq!(grid.last_idx(), 10);
    }

    #[test]
    fn delay_longer_than_horizon_is_rejected() {
        assert!(TimeGrid::new(1.0, 1.5, 10).is_err());
    }

    #[test]
    fn degenerate_parameters_are_all_reported() {
        let err = TimeGrid::new(-1.0, -0.5, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t_horizon"));
        assert!(msg.contains("n_steps"));
        assert!(msg.contains("delay"));
    }
}
