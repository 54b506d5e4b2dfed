//! Regression Monte Carlo for backward equations, with and without
//! anticipated terms, plus a deterministic delayed-ODE solver used as an
//! oracle in the test suites.
//!
//! The discrete backward recursion over one step `[t_j, t_{j+1}]` is the
//! standard explicit scheme
//!
//! ```text
//! z_j    = E_j[ y_{j+1} dW_j ] / h
//! zbar_j = E_j[ y_{j+1} dWbar_j ] / h
//! y_j    = E_j[ y_{j+1} + f(t_j, x_j, y_{j+1}, z_j, zbar_j, yhat_{j+k}, ..) h ]
//! ```
//!
//! where every `E_j` is a cross-sectional regression on observable features
//! at `t_j` (see [`crate::engine::regression`]) and `yhat_{j+k}` estimates
//! the anticipated value `E_j[y(t_j + delta)]`. Future values past the
//! horizon come from the prescribed deterministic extension on
//! `(T, T + delta]`, so the interval-by-interval recursion for anticipated
//! equations collapses into one uniform backward sweep: each index is
//! written exactly once, and the spliced segments share their boundary
//! value by construction.
//!
//! Output conventions at the right endpoint: `y(T)` is the terminal datum;
//! `z` and `zbar` are determined by the scheme only up to `t_{n-1}`, and the
//! stored value at `t_n` repeats the last computed one so that time
//! quadratures over `[0, T]` have a value to read. Anticipated reads of
//! diffusion blocks at exactly `t = T` use zero, matching the convention
//! that the extension interval is open on the left.

use crate::engine::{FeatureSet, ObservedBasis, PathBundle, RegressionPlan, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::StepCtx;
use crate::trajectory::Trajectory;

/// Driver `f` of a backward equation. The `y` argument receives the
/// one-step-ahead value (explicit scheme); `y_ahead` receives the estimate
/// of the anticipated value when the problem declares one, and zeros
/// otherwise.
pub trait BackwardDriver {
    fn dim_y(&self) -> usize;

    #[allow(clippy::too_many_arguments)]
    fn eval(
        &self,
        ctx: &StepCtx,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zbar: &[f64],
        y_ahead: &[f64],
        out: &mut [f64],
    );
}

/// Terminal condition `y(T)`.
pub enum Terminal<'a> {
    /// `y(T) = map(x(T))` per path.
    FromState(&'a dyn Fn(&[f64]) -> Vec<f64>),
    /// Arbitrary per-path terminal data.
    PerPath(&'a dyn Fn(usize) -> Vec<f64>),
}

/// A backward problem: driver, terminal condition, extension past the
/// horizon, and whether the driver anticipates `y(t + delta)`.
pub struct BackwardProblem<'a> {
    pub driver: &'a dyn BackwardDriver,
    pub terminal: Terminal<'a>,
    /// Deterministic values on `(T, T + delta]`; zeros when absent.
    pub extension: Option<&'a dyn Fn(f64) -> Vec<f64>>,
    /// When set, the driver's `y_ahead` argument receives the regression
    /// estimate of `E_j[y(t_j + delta)]`.
    pub anticipated: bool,
}

/// Solution blocks of a backward solve.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// `y` on `[0, n + delay_steps]` for anticipated problems (the part
    /// above `n` is the extension), `[0, n]` otherwise.
    pub y: Trajectory,
    /// `z` on `[0, n]`.
    pub z: Trajectory,
    /// `zbar` on `[0, n]`; identically zero when the solve runs on the
    /// observed filtration only.
    pub zbar: Trajectory,
}

impl BackwardSolution {
    /// Deterministic initial value `y(0)` (all paths agree at `t = 0` up to
    /// the regression's reduction to the sample mean); returns that mean.
    pub fn y0(&self) -> Vec<f64> {
        self.y.mean_at(0)
    }
}

/// Standard backward equation: no anticipation.
pub fn solve_bsde(
    driver: &dyn BackwardDriver,
    terminal: Terminal,
    state: Option<&Trajectory>,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
) -> Result<BackwardSolution> {
    let problem = BackwardProblem {
        driver,
        terminal,
        extension: None,
        anticipated: false,
    };
    solve_backward(&problem, state, grid, paths, basis, features)
}

/// Anticipated backward equation: the driver reads an estimate of
/// `E_t[y(t + delta)]`, and `y` past the horizon follows the deterministic
/// extension (zero when none is given).
pub fn solve_absde(
    problem: &BackwardProblem,
    state: Option<&Trajectory>,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
) -> Result<BackwardSolution> {
    solve_backward(problem, state, grid, paths, basis, features)
}

fn terminal_values(
    terminal: &Terminal,
    state: Option<&Trajectory>,
    n: isize,
    m: usize,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(m);
    for p in 0..m {
        let v = match terminal {
            Terminal::FromState(map) => {
                let x = state.ok_or_else(|| {
                    Error::invalid("terminal condition reads the state, but no state block was supplied")
                })?;
                map(x.at(p, n))
            }
            Terminal::PerPath(f) => f(p),
        };
        if v.len() != dim {
            return Err(Error::Dimension {
                context: "terminal condition".to_string(),
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFinite {
                context: "terminal condition".to_string(),
                path: p,
                time_index: n,
            });
        }
        out.push(v);
    }
    Ok(out)
}

fn solve_backward(
    problem: &BackwardProblem,
    state: Option<&Trajectory>,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
) -> Result<BackwardSolution> {
    let dim = problem.driver.dim_y();
    let n = grid.n_steps() as isize;
    let k = grid.delay_steps() as isize;
    let m = paths.m_paths();
    assert_eq!(features.m_paths(), m, "feature/path count mismatch");

    let y_hi = if problem.anticipated || problem.extension.is_some() {
        n + k
    } else {
        n
    };
    let mut y = Trajectory::zeros(m, dim, 0, y_hi);
    let mut z = Trajectory::zeros(m, dim, 0, n);
    let mut zbar = Trajectory::zeros(m, dim, 0, n);

    let term = terminal_values(&problem.terminal, state, n, m, dim)?;
    for p in 0..m {
        y.set(p, n, &term[p]);
    }
    for idx in (n + 1)..=y_hi {
        let v = match problem.extension {
            Some(ext) => ext(grid.t(idx)),
            None => vec![0.0; dim],
        };
        if v.len() != dim {
            return Err(Error::Dimension {
                context: "terminal extension".to_string(),
                expected: dim,
                got: v.len(),
            });
        }
        for p in 0..m {
            y.set(p, idx, &v);
        }
    }

    let h = grid.h();
    let n_feat = features.n_features();
    let mut feat_buf = Vec::new();
    let mut target = vec![0.0; m];
    let mut ahead = vec![0.0; dim * m];
    let zeros = vec![0.0; dim];
    let mut fv = vec![0.0; dim];

    for j in (0..n).rev() {
        features.gather(j, &mut feat_buf);
        let plan = basis.plan(&feat_buf, n_feat, m, j)?;

        // Diffusion blocks from the martingale increments.
        for c in 0..dim {
            for p in 0..m {
                target[p] = y.component(p, j + 1, c) * paths.dw_at(p, j as usize) / h;
            }
            let fit = plan.fit(&target)?;
            for p in 0..m {
                z.at_mut(p, j)[c] = fit[p];
            }
            for p in 0..m {
                target[p] = y.component(p, j + 1, c) * paths.dwbar_at(p, j as usize) / h;
            }
            let fit = plan.fit(&target)?;
            for p in 0..m {
                zbar.at_mut(p, j)[c] = fit[p];
            }
        }

        // Anticipated value estimate, when the problem carries one.
        if problem.anticipated {
            for c in 0..dim {
                for p in 0..m {
                    target[p] = y.component(p, j + k, c);
                }
                let fit = plan.fit(&target)?;
                for p in 0..m {
                    ahead[p * dim + c] = fit[p];
                }
            }
        }

        // Value update through the driver.
        let ctx_t = grid.t(j);
        for c in 0..dim {
            for p in 0..m {
                let ctx = StepCtx {
                    path: p,
                    idx: j,
                    t: ctx_t,
                };
                let x: &[f64] = match state {
                    Some(s) => s.at(p, j),
                    None => &[],
                };
                let y_next = y.at(p, j + 1);
                let ahead_p: &[f64] = if problem.anticipated {
                    &ahead[p * dim..(p + 1) * dim]
                } else {
                    &zeros
                };
                problem
                    .driver
                    .eval(&ctx, x, y_next, z.at(p, j), zbar.at(p, j), ahead_p, &mut fv);
                target[p] = y.component(p, j + 1, c) + fv[c] * h;
            }
            let fit = plan.fit(&target)?;
            for p in 0..m {
                y.at_mut(p, j)[c] = fit[p];
            }
        }
    }

    // Repeat the last computed diffusion value at t_n for quadrature reads.
    if n >= 1 {
        for p in 0..m {
            let zv = z.at(p, n - 1).to_vec();
            z.set(p, n, &zv);
            let zbv = zbar.at(p, n - 1).to_vec();
            zbar.set(p, n, &zbv);
        }
    }

    Ok(BackwardSolution { y, z, zbar })
}

/// View of already-solved future values handed to anticipated-term
/// callbacks of the linear sweep.
pub struct FutureView<'a> {
    pub y: &'a Trajectory,
    pub k: &'a Trajectory,
    pub kbar: &'a Trajectory,
    /// Last index of `[0, T]`; diffusion reads at or beyond it return zero.
    pub n: isize,
}

impl FutureView<'_> {
    /// Value block at `(path, idx)`; extension values included.
    pub fn y_at(&self, path: usize, idx: isize) -> &[f64] {
        self.y.at(path, idx)
    }

    /// Diffusion block with the open-left extension convention: zero at
    /// `t >= T`.
    pub fn k_at(&self, path: usize, idx: isize) -> Vec<f64> {
        if idx >= self.n {
            vec![0.0; self.k.dim()]
        } else {
            self.k.at(path, idx).to_vec()
        }
    }

    pub fn kbar_at(&self, path: usize, idx: isize) -> Vec<f64> {
        if idx >= self.n {
            vec![0.0; self.kbar.dim()]
        } else {
            self.kbar.at(path, idx).to_vec()
        }
    }
}

/// Linear backward equation with anticipated future terms, the shape every
/// adjoint equation in this crate takes:
///
/// ```text
/// -dY = { drift(t, Y_next, K, Kbar, E_t[ant]) } dt - K dW - Kbar dWbar
/// ```
///
/// `ant` is assembled per path from already-solved future values (value
/// block and diffusion blocks at `t + delta`), then projected on the
/// features at `t`; the drift callback receives that projection.
pub struct LinearBackwardSweep<'a> {
    pub dim: usize,
    /// Per-path terminal data at `t = T`.
    pub terminal: &'a dyn Fn(usize) -> Vec<f64>,
    /// Deterministic extension on `(T, T + delta]`; zeros when absent.
    pub extension: Option<&'a dyn Fn(f64) -> Vec<f64>>,
    /// Full drift evaluation: `(ctx, y_next, k, kbar, ant_estimate, out)`.
    pub drift: &'a dyn Fn(&StepCtx, &[f64], &[f64], &[f64], &[f64], &mut [f64]),
    /// Raw anticipated contribution at `(ctx)` read from future values;
    /// `None` for problems without anticipated terms.
    pub anticipated: Option<&'a dyn Fn(&StepCtx, &FutureView, &mut [f64])>,
    /// Whether the equation is driven by the unobserved motion as well; a
    /// solve on the observed filtration leaves `Kbar` identically zero.
    pub use_wbar: bool,
}

/// Pre-regression backward targets captured during a linear sweep.
///
/// At each interior index `j < n` these are the per-path samples whose
/// regression yields the fitted trajectories: `value` holds
/// `y(j+1) + drift_j h`, `diff_w` holds `y(j+1) dW_j / h`, and `diff_wbar`
/// holds `y(j+1) dWbar_j / h`. Index `n` carries the terminal values and
/// the copied diffusion slices so the targets align with the fitted
/// solution index-for-index.
///
/// Moment checks pair these with adapted test processes instead of the
/// fitted values: the regression leaves the empirical pairing against any
/// basis function unchanged, while the targets retain genuine Monte Carlo
/// noise, so the reported standard error reflects real sampling
/// uncertainty rather than the near-deterministic fitted surface.
pub struct RawBackwardTargets {
    pub value: Trajectory,
    pub diff_w: Trajectory,
    pub diff_wbar: Trajectory,
}

/// Runs the linear anticipated sweep. Every conditional expectation uses
/// the same per-step regression plan on the supplied features.
pub fn solve_linear_backward(
    sweep: &LinearBackwardSweep,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
) -> Result<BackwardSolution> {
    let (sol, _) = run_linear_sweep(sweep, grid, paths, basis, features, false)?;
    Ok(sol)
}

/// Same sweep, additionally returning the pre-regression targets for
/// moment checks that need honest per-path noise.
pub fn solve_linear_backward_with_raw(
    sweep: &LinearBackwardSweep,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
) -> Result<(BackwardSolution, RawBackwardTargets)> {
    let (sol, raw) = run_linear_sweep(sweep, grid, paths, basis, features, true)?;
    Ok((sol, raw.expect("raw targets requested")))
}

fn run_linear_sweep(
    sweep: &LinearBackwardSweep,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
    keep_raw: bool,
) -> Result<(BackwardSolution, Option<RawBackwardTargets>)> {
    let dim = sweep.dim;
    let n = grid.n_steps() as isize;
    let k_steps = grid.delay_steps() as isize;
    let m = paths.m_paths();
    assert_eq!(features.m_paths(), m, "feature/path count mismatch");

    let y_hi = if sweep.anticipated.is_some() || sweep.extension.is_some() {
        n + k_steps
    } else {
        n
    };
    let mut y = Trajectory::zeros(m, dim, 0, y_hi);
    let mut kk = Trajectory::zeros(m, dim, 0, n);
    let mut kkbar = Trajectory::zeros(m, dim, 0, n);
    let mut raw = keep_raw.then(|| RawBackwardTargets {
        value: Trajectory::zeros(m, dim, 0, n),
        diff_w: Trajectory::zeros(m, dim, 0, n),
        diff_wbar: Trajectory::zeros(m, dim, 0, n),
    });

    for p in 0..m {
        let v = (sweep.terminal)(p);
        assert_eq!(v.len(), dim, "terminal dimension");
        if v.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFinite {
                context: "linear backward terminal".to_string(),
                path: p,
                time_index: n,
            });
        }
        y.set(p, n, &v);
    }
    for idx in (n + 1)..=y_hi {
        let v = match sweep.extension {
            Some(ext) => ext(grid.t(idx)),
            None => vec![0.0; dim],
        };
        for p in 0..m {
            y.set(p, idx, &v);
        }
    }

    let h = grid.h();
    let n_feat = features.n_features();
    let mut feat_buf = Vec::new();
    let mut target = vec![0.0; m];
    let mut ant_raw = vec![0.0; dim * m];
    let mut ant_fit = vec![0.0; dim * m];
    let mut drift_buf = vec![0.0; dim];

    for j in (0..n).rev() {
        features.gather(j, &mut feat_buf);
        let plan = basis.plan(&feat_buf, n_feat, m, j)?;

        for c in 0..dim {
            for p in 0..m {
                target[p] = y.component(p, j + 1, c) * paths.dw_at(p, j as usize) / h;
            }
            if let Some(raw) = raw.as_mut() {
                for p in 0..m {
                    raw.diff_w.at_mut(p, j)[c] = target[p];
                }
            }
            let fit = plan.fit(&target)?;
            for p in 0..m {
                kk.at_mut(p, j)[c] = fit[p];
            }
        }
        if sweep.use_wbar {
            for c in 0..dim {
                for p in 0..m {
                    target[p] = y.component(p, j + 1, c) * paths.dwbar_at(p, j as usize) / h;
                }
                if let Some(raw) = raw.as_mut() {
                    for p in 0..m {
                        raw.diff_wbar.at_mut(p, j)[c] = target[p];
                    }
                }
                let fit = plan.fit(&target)?;
                for p in 0..m {
                    kkbar.at_mut(p, j)[c] = fit[p];
                }
            }
        }

        if let Some(ant) = sweep.anticipated {
            let view = FutureView {
                y: &y,
                k: &kk,
                kbar: &kkbar,
                n,
            };
            let t = grid.t(j);
            for p in 0..m {
                let ctx = StepCtx { path: p, idx: j, t };
                ant(&ctx, &view, &mut ant_raw[p * dim..(p + 1) * dim]);
            }
            for c in 0..dim {
                for p in 0..m {
                    target[p] = ant_raw[p * dim + c];
                }
                let fit = plan.fit(&target)?;
                for p in 0..m {
                    ant_fit[p * dim + c] = fit[p];
                }
            }
        } else {
            ant_fit.fill(0.0);
        }

        let t = grid.t(j);
        for c in 0..dim {
            for p in 0..m {
                let ctx = StepCtx { path: p, idx: j, t };
                (sweep.drift)(
                    &ctx,
                    y.at(p, j + 1),
                    kk.at(p, j),
                    kkbar.at(p, j),
                    &ant_fit[p * dim..(p + 1) * dim],
                    &mut drift_buf,
                );
                target[p] = y.component(p, j + 1, c) + drift_buf[c] * h;
            }
            if let Some(raw) = raw.as_mut() {
                for p in 0..m {
                    raw.value.at_mut(p, j)[c] = target[p];
                }
            }
            let fit = plan.fit(&target)?;
            for p in 0..m {
                y.at_mut(p, j)[c] = fit[p];
            }
        }
    }

    if n >= 1 {
        for p in 0..m {
            let kv = kk.at(p, n - 1).to_vec();
            kk.set(p, n, &kv);
            let kbv = kkbar.at(p, n - 1).to_vec();
            kkbar.set(p, n, &kbv);
        }
    }
    if let Some(raw) = raw.as_mut() {
        for p in 0..m {
            let yv = y.at(p, n).to_vec();
            raw.value.set(p, n, &yv);
            let kv = kk.at(p, n).to_vec();
            raw.diff_w.set(p, n, &kv);
            let kbv = kkbar.at(p, n).to_vec();
            raw.diff_wbar.set(p, n, &kbv);
        }
    }

    Ok((
        BackwardSolution {
            y,
            z: kk,
            zbar: kkbar,
        },
        raw,
    ))
}

/// Deterministic backward delayed ODE on a fine grid,
///
/// ```text
/// psi'(t) = -a(t) psi(t) - c(t) psi(t + delta),  psi(T) = terminal,
/// psi(s)  = extension(s) on (T, T + delta],
/// ```
///
/// solved by implicit backward Euler. Serves as the independent oracle for
/// the stochastic recursions when their drivers degenerate to this form.
/// Returns `psi` at the `n_fine + 1` grid times of `[0, T]`.
pub fn solve_delayed_ode(
    a: &dyn Fn(f64) -> f64,
    c: &dyn Fn(f64) -> f64,
    terminal: f64,
    extension: &dyn Fn(f64) -> f64,
    t_horizon: f64,
    delta: f64,
    n_fine: usize,
) -> Result<Vec<f64>> {
    let grid = TimeGrid::new(t_horizon, delta, n_fine)?;
    let h = grid.h();
    let k = grid.delay_steps();
    let n = n_fine;
    let mut psi = vec![0.0; n + k + 1];
    psi[n] = terminal;
    for idx in (n + 1)..=(n + k) {
        psi[idx] = extension(grid.t(idx as isize));
    }
    for j in (0..n).rev() {
        let t = grid.t(j as isize);
        let denom = 1.0 - h * a(t);
        if denom.abs() < 1e-12 {
            return Err(Error::invalid(format!(
                "delayed ODE step is singular at t = {t}: 1 - h a(t) vanishes"
            )));
        }
        psi[j] = (psi[j + 1] + h * c(t) * psi[j + k]) / denom;
    }
    psi.truncate(n + 1);
    Ok(psi)
}

/// Convenience wrapper reusing one regression plan per time slice outside
/// the sweeps (e.g. when a caller wants a single conditional expectation of
/// an arbitrary per-path sample at a given time).
pub fn conditional_at(
    basis: &ObservedBasis,
    features: &FeatureSet,
    idx: isize,
    targets: &[f64],
) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    features.gather(idx, &mut buf);
    let plan: RegressionPlan = basis.plan(&buf, features.n_features(), targets.len(), idx)?;
    plan.fit(targets)
}
