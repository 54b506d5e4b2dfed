//! Euler scheme for forward equations with a pointwise state delay.
//!
//! The state follows
//! `dx = b(t, x, x_delay) dt + s(t, x, x_delay) dW + sbar(t, x, x_delay) dWbar`
//! on `[0, T]`, where `x_delay(t) = x(t - delta)` and the initial segment on
//! `[-delta, 0]` is prescribed. Because the grid aligns the delay exactly,
//! the delayed read is a plain index shift; the scheme is explicit Euler
//! with one evaluation of each coefficient per step.
//!
//! Coefficient callbacks receive the step context (path, index, time) so
//! linearizations along a stored trajectory can be expressed with the same
//! interface as plain state-dependent models.

use crate::engine::{PathBundle, TimeGrid};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Position of one coefficient evaluation: which path and which grid time.
#[derive(Debug, Clone, Copy)]
pub struct StepCtx {
    pub path: usize,
    pub idx: isize,
    pub t: f64,
}

/// Coefficients of a delayed forward equation.
///
/// Implementations write into `out` (length `dim`). A model without an
/// unobserved-noise exposure leaves `diffusion_wbar` at its default, which
/// writes zeros.
pub trait SddeCoeffs {
    fn dim(&self) -> usize;

    fn drift(&self, ctx: &StepCtx, x: &[f64], x_delay: &[f64], out: &mut [f64]);

    fn diffusion_w(&self, ctx: &StepCtx, x: &[f64], x_delay: &[f64], out: &mut [f64]);

    fn diffusion_wbar(&self, ctx: &StepCtx, x: &[f64], x_delay: &[f64], out: &mut [f64]) {
        let _ = (ctx, x, x_delay);
        out.fill(0.0);
    }
}

/// Initial data on `[-delta, 0]`.
pub enum InitialPath<'a> {
    /// The same value everywhere on `[-delta, 0]`.
    Constant(Vec<f64>),
    /// Zero on `[-delta, 0)` with a separate value at `t = 0`; the form
    /// delayed-surplus models use.
    ZeroHistory(Vec<f64>),
    /// Evaluated at each grid time of `[-delta, 0]`.
    Fn(&'a dyn Fn(f64) -> Vec<f64>),
}

impl InitialPath<'_> {
    fn value_at(&self, idx: isize, t: f64, dim: usize) -> Vec<f64> {
        let v = match self {
            InitialPath::Constant(v) => v.clone(),
            InitialPath::ZeroHistory(v0) => {
                if idx < 0 {
                    vec![0.0; dim]
                } else {
                    v0.clone()
                }
            }
            InitialPath::Fn(f) => f(t),
        };
        assert_eq!(v.len(), dim, "initial path dimension");
        v
    }
}

/// Runs the Euler scheme for every path in the bundle and returns the state
/// block on `[-delay_steps, n_steps]` (history included).
pub fn solve_forward_sdde(
    coeffs: &dyn SddeCoeffs,
    initial: &InitialPath,
    grid: &TimeGrid,
    paths: &PathBundle,
) -> Result<Trajectory> {
    let dim = coeffs.dim();
    let n = grid.n_steps() as isize;
    let k = grid.delay_steps() as isize;
    let m = paths.m_paths();
    assert_eq!(paths.n_steps(), grid.n_steps(), "bundle/grid step mismatch");

    let mut x = Trajectory::zeros(m, dim, -k, n);
    for idx in -k..=0 {
        let v = initial.value_at(idx, grid.t(idx), dim);
        for p in 0..m {
            x.set(p, idx, &v);
        }
    }

    let h = grid.h();
    let mut b = vec![0.0; dim];
    let mut s = vec![0.0; dim];
    let mut sb = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    for p in 0..m {
        for j in 0..n {
            let ctx = StepCtx {
                path: p,
                idx: j,
                t: grid.t(j),
            };
            let (cur, delayed) = (x.at(p, j), x.at(p, j - k));
            coeffs.drift(&ctx, cur, delayed, &mut b);
            coeffs.diffusion_w(&ctx, cur, delayed, &mut s);
            coeffs.diffusion_wbar(&ctx, cur, delayed, &mut sb);
            let dw = paths.dw_at(p, j as usize);
            let dwb = paths.dwbar_at(p, j as usize);
            for c in 0..dim {
                next[c] = cur[c] + b[c] * h + s[c] * dw + sb[c] * dwb;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "forward Euler step".to_string(),
                    path: p,
                    time_index: j + 1,
                });
            }
            x.set(p, j + 1, &next);
        }
    }
    Ok(x)
}

/// Exact pathwise solution of the linear no-delay scalar equation
/// `dx = a x dt + s x dW + sbar x dWbar`, evaluated on the same increments
/// a bundle feeds to the Euler scheme:
/// `x(t_j) = x0 * exp((a - (s^2 + sbar^2)/2) t_j + s W_j + sbar Wbar_j)`.
///
/// This is the reference for strong-convergence measurements.
pub fn exact_linear_reference(
    a: f64,
    s: f64,
    sbar: f64,
    x0: f64,
    grid: &TimeGrid,
    paths: &PathBundle,
) -> Trajectory {
    let n = grid.n_steps();
    let m = paths.m_paths();
    let drift = a - 0.5 * (s * s + sbar * sbar);
    let mut x = Trajectory::zeros(m, 1, 0, n as isize);
    for p in 0..m {
        let mut w = 0.0;
        let mut wb = 0.0;
        x.set_scalar(p, 0, x0);
        for j in 0..n {
            w += paths.dw_at(p, j);
            wb += paths.dwbar_at(p, j);
            let t = grid.t(j as isize + 1);
            x.set_scalar(p, j as isize + 1, x0 * (drift * t + s * w + sbar * wb).exp());
        }
    }
    x
}

/// Scalar linear delayed coefficients, the workhorse of the unit tests:
/// `dx = (a x + a_d x_delay) dt + (s x + s_d x_delay) dW + (sbar x + sbar_d x_delay) dWbar`.
pub struct ScalarLinearSdde {
    pub a: f64,
    pub a_delay: f64,
    pub s: f64,
    pub s_delay: f64,
    pub sbar: f64,
    pub sbar_delay: f64,
}

impl SddeCoeffs for ScalarLinearSdde {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, _ctx: &StepCtx, x: &[f64], xd: &[f64], out: &mut [f64]) {
        out[0] = self.a * x[0] + self.a_delay * xd[0];
    }

    fn diffusion_w(&self, _ctx: &StepCtx, x: &[f64], xd: &[f64], out: &mut [f64]) {
        out[0] = self.s * x[0] + self.s_delay * xd[0];
    }

    fn diffusion_wbar(&self, _ctx: &StepCtx, x: &[f64], xd: &[f64], out: &mut [f64]) {
        out[0] = self.sbar * x[0] + self.sbar_delay * xd[0];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_paths(t: f64, delta: f64, n: usize, m: usize, seed: u64) -> (TimeGrid, PathBundle) {
        let grid = TimeGrid::new(t, delta, n).unwrap();
        let paths = PathBundle::sample(&grid, m, seed);
        (grid, paths)
    }

    #[test]
    fn deterministic_exponential_growth_converges() {
        let (grid, paths) = grid_paths(1.0, 0.0, 4096, 1, 1);
        let coeffs = ScalarLinearSdde {
            a: 0.7,
            a_delay: 0.0,
            s: 0.0,
            s_delay: 0.0,
            sbar: 0.0,
            sbar_delay: 0.0,
        };
        let x = solve_forward_sdde(&coeffs, &InitialPath::Constant(vec![1.0]), &grid, &paths)
            .unwrap();
        let exact = 0.7f64.exp();
        let got = x.scalar(0, grid.n_steps() as isize);
        assert!(
            (got - exact).abs() < 2e-4,
            "Euler terminal {got} vs exp(0.7) = {exact}"
        );
    }

    #[test]
    fn pure_delay_drift_matches_the_method_of_steps() {
        // x' = x(t - 0.5), unit history: x(t) = 1 + t on [0, 0.5] and
        // 1 + t + (t - 0.5)^2 / 2 on [0.5, 1].
        let (grid, paths) = grid_paths(1.0, 0.5, 2000, 1, 3);
        let coeffs = ScalarLinearSdde {
            a: 0.0,
            a_delay: 1.0,
            s: 0.0,
            s_delay: 0.0,
            sbar: 0.0,
            sbar_delay: 0.0,
        };
        let x = solve_forward_sdde(&coeffs, &InitialPath::Constant(vec![1.0]), &grid, &paths)
            .unwrap();
        let n = grid.n_steps() as isize;
        let mid = x.scalar(0, n / 2);
        assert!((mid - 1.5).abs() < 1e-3, "x(0.5) = {mid}");
        let end = x.scalar(0, n);
        let exact = 1.0 + 1.0 + 0.25 / 2.0;
        assert!((end - exact).abs() < 1e-3, "x(1) = {end} vs {exact}");
    }

    #[test]
    fn zero_history_initials_are_applied_literally() {
        let (grid, paths) = grid_paths(1.0, 0.25, 8, 2, 5);
        let coeffs = ScalarLinearSdde {
            a: 0.0,
            a_delay: 0.0,
            s: 0.0,
            s_delay: 0.0,
            sbar: 0.0,
            sbar_delay: 0.0,
        };
        let x = solve_forward_sdde(&coeffs, &InitialPath::ZeroHistory(vec![2.0]), &grid, &paths)
            .unwrap();
        assert_eq!(x.scalar(0, -1), 0.0);
        assert_eq!(x.scalar(0, -2), 0.0);
        assert_eq!(x.scalar(0, 0), 2.0);
    }

    #[test]
    fn euler_tracks_the_exact_linear_reference() {
        let (grid, paths) = grid_paths(1.0, 0.0, 512, 256, 9);
        let coeffs = ScalarLinearSdde {
            a: 0.2,
            a_delay: 0.0,
            s: 0.3,
            s_delay: 0.0,
            sbar: 0.15,
            sbar_delay: 0.0,
        };
        let x = solve_forward_sdde(&coeffs, &InitialPath::Constant(vec![1.0]), &grid, &paths)
            .unwrap();
        let reference = exact_linear_reference(0.2, 0.3, 0.15, 1.0, &grid, &paths);
        let n = grid.n_steps() as isize;
        let mut mse = 0.0;
        for p in 0..paths.m_paths() {
            let d = x.scalar(p, n) - reference.scalar(p, n);
            mse += d * d;
        }
        let rmse = (mse / paths.m_paths() as f64).sqrt();
        assert!(rmse < 0.02, "strong terminal error {rmse} too large at h = {}", grid.h());
    }

    #[test]
    fn explosive_step_is_reported_with_position() {
        let (grid, paths) = grid_paths(1.0, 0.0, 16, 1, 2);
        struct Explode;
        impl SddeCoeffs for Explode {
            fn dim(&self) -> usize {
                1
            }
            fn drift(&self, ctx: &StepCtx, _x: &[f64], _xd: &[f64], out: &mut [f64]) {
                out[0] = if ctx.idx >= 3 { f64::INFINITY } else { 0.0 };
            }
            fn diffusion_w(&self, _ctx: &StepCtx, _x: &[f64], _xd: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
        }
        let err =
            solve_forward_sdde(&Explode, &InitialPath::Constant(vec![1.0]), &grid, &paths)
                .unwrap_err();
        match err {
            Error::NonFinite { time_index, .. } => assert_eq!(time_index, 4),
            other => panic!("unexpected error {other}"),
        }
    }
}
