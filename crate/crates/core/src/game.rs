//! Game-theoretic layer: Hamiltonians, adjoint systems, cost functionals,
//! and the numerical verification battery for candidate equilibria.
//!
//! For player `i` the Hamiltonian is
//!
//! ```text
//! H_i = <q_i, b> + <k_i, s> + <kbar_i, sbar> - <p_i, f> + l_i
//! ```
//!
//! with adjoint processes solving, along a fixed system solution,
//!
//! * `p_i` — a forward equation with delayed feedback,
//!   `dp = [f_y' p + f_ya'(t-delta) p(t-delta) - l_y] dt + [f_z' p - l_z] dW
//!   + [f_zbar' p - l_zbar] dWbar`, `p(0) = -grad gamma_i(y(0))`, zero on
//!   `[-delta, 0)`;
//! * `(q_i, k_i, kbar_i)` — a backward equation whose drift anticipates its
//!   own future, mirroring the state delay, with terminal value
//!   `-G_x' p(T) + grad Phi_i(x(T))` and zero extension past the horizon.
//!
//! A candidate control is certified three ways, all Monte Carlo:
//! best-response perturbations of the cost ([`verify_nash`]), the
//! stationarity of the Hamiltonian in the control ([`check_first_order`]),
//! and the delay-exchange identities underlying the maximum principle
//! ([`check_duality`]). Each check reports estimates with standard errors
//! and never a bare boolean.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::backward::{
    FutureView, LinearBackwardSweep, RawBackwardTargets, solve_linear_backward,
    solve_linear_backward_with_raw,
};
use crate::engine::{FeatureSet, ObservedBasis, PathBundle, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::{InitialPath, SddeCoeffs, StepCtx, solve_forward_sdde};
use crate::model::{
    Conditioning, ControlPair, CostGrads, CostModel, DriverArgs, DriverJacs, ForwardJacs,
    ForwardVals, Player, SystemModel, SystemSolution, solve_system, solve_system_with,
};
use crate::trajectory::Trajectory;

/// A model and its pair of player costs, the unit every routine here
/// operates on.
#[derive(Clone, Copy)]
pub struct GameParts<'a> {
    pub model: &'a dyn SystemModel,
    pub costs: &'a dyn CostModel,
}

/// Adjoint processes of one player along one system solution.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    /// Forward adjoint on `[-delay_steps, n]`, zero before time zero.
    pub p: Trajectory,
    /// Backward adjoint value on `[0, n + delay_steps]`, zero past `T`.
    pub q: Trajectory,
    /// Observed diffusion block on `[0, n]`.
    pub k: Trajectory,
    /// Unobserved diffusion block on `[0, n]`.
    pub kbar: Trajectory,
}

/// `out += m' * v`.
fn add_tr_mul(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for c in 0..m.ncols() {
        let mut acc = 0.0;
        for r in 0..m.nrows() {
            acc += m[(r, c)] * v[r];
        }
        out[c] += acc;
    }
}

/// `out += m * v`.
fn add_mul(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for r in 0..m.nrows() {
        let mut acc = 0.0;
        for c in 0..m.ncols() {
            acc += m[(r, c)] * v[c];
        }
        out[r] += acc;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hamiltonian of one player at one point of a solution.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    parts: &GameParts,
    player: Player,
    ctx: &StepCtx,
    x: &[f64],
    x_delay: &[f64],
    args: &DriverArgs,
    u1: &[f64],
    u2: &[f64],
    p: &[f64],
    q: &[f64],
    k: &[f64],
    kbar: &[f64],
) -> f64 {
    let dims = parts.model.dims();
    let mut vals = ForwardVals::zeros(dims.n_x);
    parts.model.forward_vals(ctx, x, x_delay, u1, u2, &mut vals);
    let mut f = vec![0.0; dims.n_y];
    parts.model.driver_vals(ctx, x, args, u1, u2, &mut f);
    let l = parts
        .costs
        .running(player, ctx, x, args.y, args.z, args.zbar, u1, u2);
    dot(q, &vals.b) + dot(k, &vals.sw) + dot(kbar, &vals.swbar) - dot(p, &f) + l
}

/// Gradient of the Hamiltonian in the player's own control:
/// `b_v' q + s_v' k + sbar_v' kbar - f_v' p + l_v`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_control_gradient(
    parts: &GameParts,
    player: Player,
    ctx: &StepCtx,
    x: &[f64],
    x_delay: &[f64],
    args: &DriverArgs,
    u1: &[f64],
    u2: &[f64],
    p: &[f64],
    q: &[f64],
    k: &[f64],
    kbar: &[f64],
) -> Vec<f64> {
    let dims = parts.model.dims();
    let i = player.index();
    let mut fj = ForwardJacs::zeros(&dims);
    parts.model.forward_jacs(ctx, x, x_delay, u1, u2, &mut fj);
    let mut dj = DriverJacs::zeros(&dims);
    parts.model.driver_jacs(ctx, x, args, u1, u2, &mut dj);
    let mut grads = CostGrads::zeros(&dims, player);
    parts
        .costs
        .running_grads(player, ctx, x, args.y, args.z, args.zbar, u1, u2, &mut grads);
    let mut out = vec![0.0; dims.n_u(player)];
    add_tr_mul(&fj.b_v[i], q, &mut out);
    add_tr_mul(&fj.sw_v[i], k, &mut out);
    add_tr_mul(&fj.swbar_v[i], kbar, &mut out);
    let mut fp = vec![0.0; dims.n_u(player)];
    add_tr_mul(&dj.f_v[i], p, &mut fp);
    for c in 0..out.len() {
        out[c] += grads.l_v[c] - fp[c];
    }
    out
}

/// One step of a linear forward adjoint equation:
/// `dp = (A p + A_d p(t-delta) + c) dt + (S p + cs) dW + (Sb p + csb) dWbar`.
pub struct AdjointForwardStep {
    pub a: DMatrix<f64>,
    pub a_delay: DMatrix<f64>,
    pub c: Vec<f64>,
    pub s: DMatrix<f64>,
    pub cs: Vec<f64>,
    pub sbar: DMatrix<f64>,
    pub csbar: Vec<f64>,
}

impl AdjointForwardStep {
    pub fn zeros(dim: usize) -> Self {
        AdjointForwardStep {
            a: DMatrix::zeros(dim, dim),
            a_delay: DMatrix::zeros(dim, dim),
            c: vec![0.0; dim],
            s: DMatrix::zeros(dim, dim),
            cs: vec![0.0; dim],
            sbar: DMatrix::zeros(dim, dim),
            csbar: vec![0.0; dim],
        }
    }
}

/// Per-path, per-step coefficients of a linear forward adjoint equation.
pub trait AdjointForwardCoeffs {
    fn dim(&self) -> usize;
    fn initial(&self, path: usize) -> Vec<f64>;
    fn step(&self, ctx: &StepCtx, out: &mut AdjointForwardStep);
}

/// Integrates a linear forward adjoint equation. Scalar homogeneous steps
/// (no additive terms, no active delay coupling) use the exact exponential
/// update `p exp((a - s^2/2 - sbar^2/2) h + s dW + sbar dWbar)`, which is
/// pathwise exact for deterministic step coefficients and keeps density
/// processes positive; every other step falls back to explicit Euler.
pub fn solve_adjoint_forward(
    coeffs: &dyn AdjointForwardCoeffs,
    grid: &TimeGrid,
    paths: &PathBundle,
) -> Result<Trajectory> {
    let dim = coeffs.dim();
    let n = grid.n_steps() as isize;
    let k = grid.delay_steps() as isize;
    let m = paths.m_paths();
    let h = grid.h();
    let mut p = Trajectory::zeros(m, dim, -k, n);
    let mut step = AdjointForwardStep::zeros(dim);
    let mut next = vec![0.0; dim];
    for path in 0..m {
        let init = coeffs.initial(path);
        assert_eq!(init.len(), dim, "adjoint initial dimension");
        p.set(path, 0, &init);
        for j in 0..n {
            let ctx = StepCtx {
                path,
                idx: j,
                t: grid.t(j),
            };
            coeffs.step(&ctx, &mut step);
            let cur = p.at(path, j);
            let dw = paths.dw_at(path, j as usize);
            let dwb = paths.dwbar_at(path, j as usize);
            let homogeneous_scalar = dim == 1
                && step.c[0] == 0.0
                && step.cs[0] == 0.0
                && step.csbar[0] == 0.0
                && (j < k || step.a_delay[(0, 0)] == 0.0);
            if homogeneous_scalar {
                let (a, s, sb) = (step.a[(0, 0)], step.s[(0, 0)], step.sbar[(0, 0)]);
                next[0] =
                    cur[0] * ((a - 0.5 * (s * s + sb * sb)) * h + s * dw + sb * dwb).exp();
            } else {
                for r in 0..dim {
                    let mut drift = step.c[r];
                    let mut dif = step.cs[r];
                    let mut difb = step.csbar[r];
                    for c in 0..dim {
                        drift += step.a[(r, c)] * cur[c];
                        dif += step.s[(r, c)] * cur[c];
                        difb += step.sbar[(r, c)] * cur[c];
                    }
                    if j >= k && k > 0 {
                        let pd = p.at(path, j - k);
                        for c in 0..dim {
                            drift += step.a_delay[(r, c)] * pd[c];
                        }
                    }
                    next[r] = cur[r] + drift * h + dif * dw + difb * dwb;
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "adjoint forward step".to_string(),
                    path,
                    time_index: j + 1,
                });
            }
            p.set(path, j + 1, &next);
        }
    }
    Ok(p)
}

struct ModelAdjointForward<'a> {
    parts: &'a GameParts<'a>,
    player: Player,
    sol: &'a SystemSolution,
    controls: &'a ControlPair,
    delay_steps: isize,
    grid: &'a TimeGrid,
}

impl ModelAdjointForward<'_> {
    fn driver_jacs_at(&self, path: usize, j: isize) -> DriverJacs {
        let dims = self.parts.model.dims();
        let ctx = StepCtx {
            path,
            idx: j,
            t: self.grid.t(j),
        };
        let args = DriverArgs {
            y: self.sol.backward.y.at(path, j),
            z: self.sol.backward.z.at(path, j),
            zbar: self.sol.backward.zbar.at(path, j),
            y_ahead: self.sol.backward.y.at(
                path,
                (j + self.delay_steps).min(self.sol.backward.y.hi()),
            ),
        };
        let mut dj = DriverJacs::zeros(&dims);
        self.parts.model.driver_jacs(
            &ctx,
            self.sol.x.at(path, j),
            &args,
            self.controls.u[0].at(path, j),
            self.controls.u[1].at(path, j),
            &mut dj,
        );
        dj
    }
}

impl AdjointForwardCoeffs for ModelAdjointForward<'_> {
    fn dim(&self) -> usize {
        self.parts.model.dims().n_y
    }

    fn initial(&self, path: usize) -> Vec<f64> {
        let y0 = self.sol.backward.y.at(path, 0);
        let mut g = self.parts.costs.initial_grad(self.player, y0);
        for v in &mut g {
            *v = -*v;
        }
        g
    }

    fn step(&self, ctx: &StepCtx, out: &mut AdjointForwardStep) {
        let dims = self.parts.model.dims();
        let dj = self.driver_jacs_at(ctx.path, ctx.idx);
        out.a.copy_from(&dj.f_y.transpose());
        out.s.copy_from(&dj.f_z.transpose());
        out.sbar.copy_from(&dj.f_zbar.transpose());
        if ctx.idx >= self.delay_steps && self.delay_steps > 0 {
            let shifted = self.driver_jacs_at(ctx.path, ctx.idx - self.delay_steps);
            out.a_delay.copy_from(&shifted.f_yahead.transpose());
        } else {
            out.a_delay.fill(0.0);
        }
        let mut grads = CostGrads::zeros(&dims, self.player);
        self.parts.costs.running_grads(
            self.player,
            ctx,
            self.sol.x.at(ctx.path, ctx.idx),
            self.sol.backward.y.at(ctx.path, ctx.idx),
            self.sol.backward.z.at(ctx.path, ctx.idx),
            self.sol.backward.zbar.at(ctx.path, ctx.idx),
            self.controls.u[0].at(ctx.path, ctx.idx),
            self.controls.u[1].at(ctx.path, ctx.idx),
            &mut grads,
        );
        for r in 0..dims.n_y {
            out.c[r] = -grads.l_y[r];
            out.cs[r] = -grads.l_z[r];
            out.csbar[r] = -grads.l_zbar[r];
        }
    }
}

/// Solves the full adjoint system of one player along a solution: the
/// forward `p` first, then the anticipated backward `(q, k, kbar)` on the
/// supplied regression features.
#[allow(clippy::too_many_arguments)]
pub fn assemble_and_solve_adjoint(
    parts: &GameParts,
    player: Player,
    sol: &SystemSolution,
    controls: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
) -> Result<AdjointTrajectory> {
    let (adj, _) = assemble_adjoint_impl(
        parts, player, sol, controls, grid, paths, basis, features, false,
    )?;
    Ok(adj)
}

/// Adjoint solve that also keeps the pre-regression backward targets of
/// `(q, k, kbar)`, for stationarity checks that need honest per-path noise
/// in their standard errors.
#[allow(clippy::too_many_arguments)]
pub fn assemble_and_solve_adjoint_with_raw(
    parts: &GameParts,
    player: Player,
    sol: &SystemSolution,
    controls: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
) -> Result<(AdjointTrajectory, RawBackwardTargets)> {
    let (adj, raw) = assemble_adjoint_impl(
        parts, player, sol, controls, grid, paths, basis, features, true,
    )?;
    Ok((adj, raw.expect("raw targets requested")))
}

#[allow(clippy::too_many_arguments)]
fn assemble_adjoint_impl(
    parts: &GameParts,
    player: Player,
    sol: &SystemSolution,
    controls: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    features: &FeatureSet,
    keep_raw: bool,
) -> Result<(AdjointTrajectory, Option<RawBackwardTargets>)> {
    let dims = parts.model.dims();
    let n = grid.n_steps() as isize;
    let k_steps = grid.delay_steps() as isize;

    let fwd = ModelAdjointForward {
        parts,
        player,
        sol,
        controls,
        delay_steps: k_steps,
        grid,
    };
    let p = solve_adjoint_forward(&fwd, grid, paths)?;

    let terminal = |path: usize| -> Vec<f64> {
        let xt = sol.x.at(path, n);
        let gj = parts.model.terminal_jac(xt);
        let mut out = parts.costs.terminal_grad(player, xt);
        let pt = p.at(path, n);
        for c in 0..dims.n_x {
            let mut acc = 0.0;
            for r in 0..dims.n_y {
                acc += gj[(r, c)] * pt[r];
            }
            out[c] -= acc;
        }
        out
    };

    let forward_jacs_at = |path: usize, j: isize| -> ForwardJacs {
        let ctx = StepCtx {
            path,
            idx: j,
            t: grid.t(j),
        };
        let mut fj = ForwardJacs::zeros(&dims);
        parts.model.forward_jacs(
            &ctx,
            sol.x.at(path, j),
            sol.x.at(path, j - k_steps),
            controls.u[0].at(path, j),
            controls.u[1].at(path, j),
            &mut fj,
        );
        fj
    };

    let drift = |ctx: &StepCtx,
                 q_next: &[f64],
                 kv: &[f64],
                 kbv: &[f64],
                 ant: &[f64],
                 out: &mut [f64]| {
        let fj = forward_jacs_at(ctx.path, ctx.idx);
        let args = DriverArgs {
            y: sol.backward.y.at(ctx.path, ctx.idx),
            z: sol.backward.z.at(ctx.path, ctx.idx),
            zbar: sol.backward.zbar.at(ctx.path, ctx.idx),
            y_ahead: sol
                .backward
                .y
                .at(ctx.path, (ctx.idx + k_steps).min(sol.backward.y.hi())),
        };
        let mut dj = DriverJacs::zeros(&dims);
        parts.model.driver_jacs(
            ctx,
            sol.x.at(ctx.path, ctx.idx),
            &args,
            controls.u[0].at(ctx.path, ctx.idx),
            controls.u[1].at(ctx.path, ctx.idx),
            &mut dj,
        );
        let mut grads = CostGrads::zeros(&dims, player);
        parts.costs.running_grads(
            player,
            ctx,
            sol.x.at(ctx.path, ctx.idx),
            sol.backward.y.at(ctx.path, ctx.idx),
            sol.backward.z.at(ctx.path, ctx.idx),
            sol.backward.zbar.at(ctx.path, ctx.idx),
            controls.u[0].at(ctx.path, ctx.idx),
            controls.u[1].at(ctx.path, ctx.idx),
            &mut grads,
        );
        out.copy_from_slice(&grads.l_x);
        add_tr_mul(&fj.b_x, q_next, out);
        add_tr_mul(&fj.sw_x, kv, out);
        add_tr_mul(&fj.swbar_x, kbv, out);
        let pt = p.at(ctx.path, ctx.idx);
        let mut fxp = vec![0.0; dims.n_x];
        add_tr_mul(&dj.f_x, pt, &mut fxp);
        for c in 0..dims.n_x {
            out[c] += ant[c] - fxp[c];
        }
    };

    // The delayed source lives on `{t : t + delta < T}`: the step whose
    // shifted index lands exactly on the horizon integrates the source over
    // a set of measure zero, so its step value is zero, not a full
    // left-endpoint mass (which would leave a persistent O(h) offset
    // against the continuous solution).
    let anticipated = move |ctx: &StepCtx, view: &FutureView, out: &mut [f64]| {
        out.fill(0.0);
        let js = ctx.idx + k_steps;
        if k_steps == 0 || js >= n {
            return;
        }
        let fj = forward_jacs_at(ctx.path, js);
        add_tr_mul(&fj.b_xd, view.y_at(ctx.path, js), out);
        add_tr_mul(&fj.sw_xd, &view.k_at(ctx.path, js), out);
        add_tr_mul(&fj.swbar_xd, &view.kbar_at(ctx.path, js), out);
    };

    let sweep = LinearBackwardSweep {
        dim: dims.n_x,
        terminal: &terminal,
        extension: None,
        drift: &drift,
        anticipated: if k_steps > 0 { Some(&anticipated) } else { None },
        use_wbar: true,
    };
    let (back, raw) = if keep_raw {
        let (b, r) = solve_linear_backward_with_raw(&sweep, grid, paths, basis, features)?;
        (b, Some(r))
    } else {
        let b = solve_linear_backward(&sweep, grid, paths, basis, features)?;
        (b, None)
    };

    Ok((
        AdjointTrajectory {
            p,
            q: back.y,
            k: back.z,
            kbar: back.zbar,
        },
        raw,
    ))
}

/// Monte Carlo cost estimate with its standard error and the per-path
/// samples (for common-random-number pairing).
#[derive(Debug, Clone, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub se: f64,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl CostEstimate {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let m = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / m;
        let var = if samples.len() > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        CostEstimate {
            mean,
            se: (var / m).sqrt(),
            samples,
        }
    }
}

/// Cost of one player under fixed controls on an already-computed solution.
/// Running term by trapezoidal quadrature; the initial term is evaluated on
/// the regression estimate of `y(0)`.
pub fn eval_cost_with_solution(
    parts: &GameParts,
    player: Player,
    controls: &ControlPair,
    sol: &SystemSolution,
    grid: &TimeGrid,
) -> CostEstimate {
    let n = grid.n_steps() as isize;
    let h = grid.h();
    let m = sol.x.m_paths();
    let mut samples = Vec::with_capacity(m);
    for p in 0..m {
        let mut acc = 0.0;
        for j in 0..=n {
            let w = if j == 0 || j == n { 0.5 * h } else { h };
            let ctx = StepCtx {
                path: p,
                idx: j,
                t: grid.t(j),
            };
            acc += w * parts.costs.running(
                player,
                &ctx,
                sol.x.at(p, j),
                sol.backward.y.at(p, j),
                sol.backward.z.at(p, j),
                sol.backward.zbar.at(p, j),
                controls.u[0].at(p, j),
                controls.u[1].at(p, j),
            );
        }
        acc += parts.costs.terminal(player, sol.x.at(p, n));
        acc += parts.costs.initial(player, sol.backward.y.at(p, 0));
        samples.push(acc);
    }
    CostEstimate::from_samples(samples)
}

/// Solves the system under the controls and evaluates one player's cost.
pub fn eval_cost(
    parts: &GameParts,
    player: Player,
    controls: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
) -> Result<CostEstimate> {
    let sol = solve_system(parts.model, controls, grid, paths, basis)?;
    Ok(eval_cost_with_solution(parts, player, controls, &sol, grid))
}

/// Evaluates player costs under a control pair; implemented generically
/// here and specially by models with closed-form cost decompositions.
pub trait CostEvaluator {
    fn eval(&self, player: Player, controls: &ControlPair) -> Result<CostEstimate>;
}

/// Generic evaluator running the full system solve per call.
pub struct GenericEvaluator<'a> {
    pub parts: GameParts<'a>,
    pub grid: &'a TimeGrid,
    pub paths: &'a PathBundle,
    pub basis: &'a ObservedBasis,
}

impl CostEvaluator for GenericEvaluator<'_> {
    fn eval(&self, player: Player, controls: &ControlPair) -> Result<CostEstimate> {
        eval_cost(&self.parts, player, controls, self.grid, self.paths, self.basis)
    }
}

/// Deterministic time profile of a perturbation direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionProfile {
    /// Constant shift by the given amount.
    Constant(f64),
    /// Linear ramp `t / T`.
    Ramp,
    /// Half sine `sin(pi t / T)`.
    Sine,
}

impl DirectionProfile {
    pub fn eval(&self, t: f64, t_horizon: f64) -> f64 {
        match self {
            DirectionProfile::Constant(a) => *a,
            DirectionProfile::Ramp => t / t_horizon,
            DirectionProfile::Sine => (std::f64::consts::PI * t / t_horizon).sin(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            DirectionProfile::Constant(a) => format!("constant({a})"),
            DirectionProfile::Ramp => "ramp".to_string(),
            DirectionProfile::Sine => "sine".to_string(),
        }
    }
}

/// Applies `u_i <- proj(u_i + eps * profile(t) * 1)` on the player's block.
pub fn perturbed_controls(
    candidate: &ControlPair,
    player: Player,
    profile: &DirectionProfile,
    eps: f64,
    grid: &TimeGrid,
) -> ControlPair {
    let mut out = candidate.clone();
    let i = player.index();
    let block = &mut out.u[i];
    let n = grid.n_steps() as isize;
    for p in 0..block.m_paths() {
        for j in 0..=n {
            let shift = eps * profile.eval(grid.t(j), grid.t_horizon());
            let v = block.at_mut(p, j);
            for c in 0..v.len() {
                v[c] += shift;
            }
            out.admissible[i].project(block.at_mut(p, j));
        }
    }
    out
}

/// Options of the best-response check.
#[derive(Debug, Clone)]
pub struct NashOptions {
    pub epsilons: Vec<f64>,
    pub profiles: Vec<DirectionProfile>,
    pub se_mult: f64,
}

impl Default for NashOptions {
    fn default() -> Self {
        NashOptions {
            epsilons: vec![0.02, 0.05, 0.1],
            profiles: vec![
                DirectionProfile::Constant(1.0),
                DirectionProfile::Constant(-1.0),
                DirectionProfile::Sine,
            ],
            se_mult: 3.0,
        }
    }
}

/// One deviation row of the best-response check. `delta_mean` is the
/// common-random-number paired estimate of `J_i(deviation) - J_i(candidate)`.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationRow {
    pub player: usize,
    pub profile: String,
    pub epsilon: f64,
    pub delta_mean: f64,
    pub delta_se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NashReport {
    pub cost: [CostEstimate; 2],
    pub deviations: Vec<DeviationRow>,
    pub se_mult: f64,
    pub all_pass: bool,
}

/// Best-response verification: no unilateral deviation in the battery may
/// improve the deviating player's cost by more than `se_mult` standard
/// errors of the paired difference.
pub fn verify_nash(
    evaluator: &dyn CostEvaluator,
    candidate: &ControlPair,
    grid: &TimeGrid,
    options: &NashOptions,
) -> Result<NashReport> {
    let base = [
        evaluator.eval(Player::One, candidate)?,
        evaluator.eval(Player::Two, candidate)?,
    ];
    let mut deviations = Vec::new();
    let mut all_pass = true;
    for player in Player::BOTH {
        for profile in &options.profiles {
            for &eps in &options.epsilons {
                let shifted = perturbed_controls(candidate, player, profile, eps, grid);
                let cost = evaluator.eval(player, &shifted)?;
                let b = &base[player.index()];
                assert_eq!(cost.samples.len(), b.samples.len(), "evaluator path count changed");
                let deltas: Vec<f64> = cost
                    .samples
                    .iter()
                    .zip(&b.samples)
                    .map(|(a, c)| a - c)
                    .collect();
                let est = CostEstimate::from_samples(deltas);
                let pass = est.mean <= options.se_mult * est.se;
                all_pass &= pass;
                deviations.push(DeviationRow {
                    player: player.index() + 1,
                    profile: profile.label(),
                    epsilon: eps,
                    delta_mean: est.mean,
                    delta_se: est.se,
                    pass,
                });
            }
        }
    }
    Ok(NashReport {
        cost: base,
        deviations,
        se_mult: options.se_mult,
        all_pass,
    })
}

/// One moment of the stationarity battery. `estimate`/`se`/`z` describe
/// the time-integrated pairing of the Hamiltonian control gradient with
/// one direction; the `peak_*` fields describe the grid time at which the
/// instantaneous pairing is most significant (largest `|mean| / se` over
/// grid times).
#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub player: usize,
    pub component: usize,
    pub profile: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub peak_time: f64,
    pub peak_estimate: f64,
    pub peak_se: f64,
    pub peak_z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FirstOrderReport {
    pub rows: Vec<MomentRow>,
    /// Largest `|z|` of the time-integrated moments.
    pub max_abs_z: f64,
    /// Largest `|peak_z|`: the most significant single grid time across
    /// all rows.
    pub max_abs_peak_z: f64,
    pub se_mult: f64,
    /// Delete-one-block jackknife replicates behind every standard error.
    pub blocks: usize,
    pub pass: bool,
}

/// Number of jackknife blocks behind the battery's standard errors,
/// scaled down for small path counts so each delete-one-block replicate
/// still differs meaningfully from the full set.
fn battery_block_count(m: usize) -> usize {
    if m >= 2048 {
        16
    } else if m >= 512 {
        8
    } else if m >= 128 {
        4
    } else {
        2
    }
}

/// Delete-one-block jackknife standard error: the spread of the
/// replicate values scaled so it estimates the sampling error of the
/// full-sample statistic, `sqrt((B - 1) / B * sum_b (r_b - r_mean)^2)`.
fn jackknife_se(replicates: &[f64]) -> f64 {
    let b = replicates.len() as f64;
    let mean = replicates.iter().sum::<f64>() / b;
    let ss: f64 = replicates.iter().map(|r| (r - mean) * (r - mean)).sum();
    ((b - 1.0) / b * ss).sqrt()
}

/// Floor applied to a standard error before forming a z-statistic. A
/// spread this far below the estimate's own scale means the quantity is
/// deterministic at floating-point resolution: a nonzero estimate is then
/// a real violation (the ratio blows up), while round-off dust stays
/// quiet instead of dividing two epsilons into a fake significance.
fn z_stat(mean: f64, se: f64) -> f64 {
    mean / se.max(1e-14 * (1.0 + mean.abs()))
}

/// Stationarity check: for every control component and every direction in
/// a fixed battery (constant, ramp, and a bounded path-dependent profile),
/// estimates the time-integrated moment `E int <H_v(t), beta(t)> dt` with
/// its standard error, together with the per-grid-time means
/// `E <H_v(t), beta(t)>` and the most significant single time. At an
/// equilibrium every estimate is statistically indistinguishable from
/// zero.
///
/// The estimates come from the full path set; the standard errors come
/// from a delete-one-block jackknife that re-runs the entire pipeline —
/// system solve, adjoint towers, moment pairing — with one block of
/// paths removed at a time. Per-path spreads would miss the dominant
/// error source here: the adjoints are themselves regression estimates
/// built from the same paths, so their sampling error moves all paths
/// together and only shows up under resampling. Fitting every replicate
/// on nearly the full set keeps the towers' small-sample regression
/// bias at its full-sample level, which disjoint-block replications
/// would multiply by the block count. The pairing reads the raw
/// pre-regression backward targets, whose conditional means are the
/// fitted adjoints; by the normal equations this leaves every in-span
/// moment estimate unchanged while keeping the genuine per-path noise
/// in view.
#[allow(clippy::too_many_arguments)]
pub fn check_first_order(
    parts: &GameParts,
    player: Player,
    candidate: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    conditioning: Conditioning,
    se_mult: f64,
) -> Result<FirstOrderReport> {
    let dims = parts.model.dims();
    let n_u = dims.n_u(player);
    let n_times = grid.n_steps() + 1;
    let m = paths.m_paths();
    let blocks = battery_block_count(m);
    if m / blocks == 0 {
        return Err(Error::invalid(format!(
            "stationarity check needs at least {blocks} paths, got {m}"
        )));
    }

    let n_profiles = BATTERY_PROFILES.len();
    // Battery moments of one path set: ([component][profile],
    // [component][profile][time]).
    type Moments = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>);
    let evaluate = |set: &PathBundle, ctrl: &ControlPair| -> Result<Moments> {
        let sol = solve_system_with(parts.model, ctrl, grid, set, basis, conditioning)?;
        let w = set.cumulative_w();
        let wbar = set.cumulative_wbar();
        let features = match conditioning {
            Conditioning::Observed => FeatureSet::new(vec![&w, &sol.x]),
            Conditioning::FullNoise => FeatureSet::new(vec![&w, &wbar, &sol.x]),
        };
        let (adj, raw) = assemble_and_solve_adjoint_with_raw(
            parts, player, &sol, ctrl, grid, set, basis, &features,
        )?;
        let mut integ = vec![vec![0.0; n_profiles]; n_u];
        let mut slice = vec![vec![vec![0.0; n_times]; n_profiles]; n_u];
        accumulate_battery_set(
            parts,
            player,
            ctrl,
            &sol,
            &adj,
            &raw,
            grid,
            set,
            |c, pi, v| integ[c][pi] += v,
            |c, pi, j, v| slice[c][pi][j] += v,
        );
        Ok((integ, slice))
    };

    let (pos_integ, pos_slice) = evaluate(paths, candidate)?;
    // [component][profile][block] and [component][profile][time][block].
    let mut rep_integ = vec![vec![vec![0.0; blocks]; n_profiles]; n_u];
    let mut rep_slice = vec![vec![vec![vec![0.0; blocks]; n_times]; n_profiles]; n_u];
    for b in 0..blocks {
        let lo = b * m / blocks;
        let hi = (b + 1) * m / blocks;
        let (ri, rs) = evaluate(
            &paths.without_paths(lo, hi - lo),
            &candidate.without_paths(lo, hi - lo),
        )?;
        for c in 0..n_u {
            for pi in 0..n_profiles {
                rep_integ[c][pi][b] = ri[c][pi];
                for j in 0..n_times {
                    rep_slice[c][pi][j][b] = rs[c][pi][j];
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut max_abs_z: f64 = 0.0;
    let mut max_abs_peak_z: f64 = 0.0;
    for c in 0..n_u {
        for (pi, (label, _)) in BATTERY_PROFILES.iter().enumerate() {
            let est = pos_integ[c][pi];
            let se = jackknife_se(&rep_integ[c][pi]);
            let z = z_stat(est, se);
            max_abs_z = max_abs_z.max(z.abs());
            let mut peak = (0.0_f64, 0.0, 0.0, 0.0); // (z, t, est, se)
            for j in 0..n_times {
                let t_est = pos_slice[c][pi][j];
                let t_se = jackknife_se(&rep_slice[c][pi][j]);
                let z_t = z_stat(t_est, t_se);
                if z_t.abs() >= peak.0.abs() {
                    peak = (z_t, grid.t(j as isize), t_est, t_se);
                }
            }
            max_abs_peak_z = max_abs_peak_z.max(peak.0.abs());
            rows.push(MomentRow {
                player: player.index() + 1,
                component: c,
                profile: label.to_string(),
                estimate: est,
                se,
                z,
                peak_time: peak.1,
                peak_estimate: peak.2,
                peak_se: peak.3,
                peak_z: peak.0,
            });
        }
    }
    Ok(FirstOrderReport {
        rows,
        max_abs_z,
        max_abs_peak_z,
        se_mult,
        blocks,
        pass: max_abs_z <= se_mult && max_abs_peak_z <= se_mult,
    })
}

/// The direction battery: a constant shift, a deterministic ramp, and a
/// bounded path-dependent profile driven by the observed motion.
type ProfileFn = fn(f64, f64, f64) -> f64;
static BATTERY_PROFILES: [(&str, ProfileFn); 3] = [
    ("constant", |_t, _t_h, _wv| 1.0),
    ("ramp", |t, t_h, _wv| t / t_h),
    ("tanh_w", |_t, _t_h, wv| wv.tanh()),
];

/// Runs the moment pairing on one path set: per-path, per-time
/// Hamiltonian control gradients against each profile, reported to the
/// sinks as sample means (time-integrated and per grid time).
#[allow(clippy::too_many_arguments)]
fn accumulate_battery_set(
    parts: &GameParts,
    player: Player,
    candidate: &ControlPair,
    sol: &SystemSolution,
    adj: &AdjointTrajectory,
    raw: &RawBackwardTargets,
    grid: &TimeGrid,
    paths: &PathBundle,
    mut integ_sink: impl FnMut(usize, usize, f64),
    mut slice_sink: impl FnMut(usize, usize, usize, f64),
) {
    let dims = parts.model.dims();
    let n = grid.n_steps() as isize;
    let k_steps = grid.delay_steps() as isize;
    let h = grid.h();
    let t_h = grid.t_horizon();
    let m = paths.m_paths();
    let w = paths.cumulative_w();
    let n_u = dims.n_u(player);
    let inv_m = 1.0 / m as f64;

    for p in 0..m {
        for j in 0..=n {
            let ctx = StepCtx {
                path: p,
                idx: j,
                t: grid.t(j),
            };
            let args = DriverArgs {
                y: sol.backward.y.at(p, j),
                z: sol.backward.z.at(p, j),
                zbar: sol.backward.zbar.at(p, j),
                y_ahead: sol.backward.y.at(p, (j + k_steps).min(sol.backward.y.hi())),
            };
            let grad = hamiltonian_control_gradient(
                parts,
                player,
                &ctx,
                sol.x.at(p, j),
                sol.x.at(p, j - k_steps),
                &args,
                candidate.u[0].at(p, j),
                candidate.u[1].at(p, j),
                adj.p.at(p, j),
                raw.value.at(p, j),
                raw.diff_w.at(p, j),
                raw.diff_wbar.at(p, j),
            );
            let wt = if j == 0 || j == n { 0.5 * h } else { h };
            let wv = w.scalar(p, j);
            for c in 0..n_u {
                for (pi, (_, profile)) in BATTERY_PROFILES.iter().enumerate() {
                    let v = grad[c] * profile(ctx.t, t_h, wv) * inv_m;
                    integ_sink(c, pi, wt * v);
                    slice_sink(c, pi, j as usize, v);
                }
            }
        }
    }
}

/// Variational forward equation: the linearization of the state around a
/// solution, driven by a deterministic perturbation of one player's
/// control.
struct VariationalForward<'a> {
    parts: &'a GameParts<'a>,
    sol: &'a SystemSolution,
    controls: &'a ControlPair,
    player: Player,
    profile: &'a DirectionProfile,
    grid: &'a TimeGrid,
    delay_steps: isize,
}

impl VariationalForward<'_> {
    fn jacs(&self, ctx: &StepCtx) -> ForwardJacs {
        let dims = self.parts.model.dims();
        let mut fj = ForwardJacs::zeros(&dims);
        self.parts.model.forward_jacs(
            ctx,
            self.sol.x.at(ctx.path, ctx.idx),
            self.sol.x.at(ctx.path, ctx.idx - self.delay_steps),
            self.controls.u[0].at(ctx.path, ctx.idx),
            self.controls.u[1].at(ctx.path, ctx.idx),
            &mut fj,
        );
        fj
    }

    fn direction(&self, t: f64, n_u: usize) -> Vec<f64> {
        vec![self.profile.eval(t, self.grid.t_horizon()); n_u]
    }
}

impl SddeCoeffs for VariationalForward<'_> {
    fn dim(&self) -> usize {
        self.parts.model.dims().n_x
    }

    fn drift(&self, ctx: &StepCtx, v: &[f64], vd: &[f64], out: &mut [f64]) {
        let fj = self.jacs(ctx);
        let i = self.player.index();
        out.fill(0.0);
        add_mul(&fj.b_x, v, out);
        add_mul(&fj.b_xd, vd, out);
        let eta = self.direction(ctx.t, self.parts.model.dims().n_u(self.player));
        add_mul(&fj.b_v[i], &eta, out);
    }

    fn diffusion_w(&self, ctx: &StepCtx, v: &[f64], vd: &[f64], out: &mut [f64]) {
        let fj = self.jacs(ctx);
        let i = self.player.index();
        out.fill(0.0);
        add_mul(&fj.sw_x, v, out);
        add_mul(&fj.sw_xd, vd, out);
        let eta = self.direction(ctx.t, self.parts.model.dims().n_u(self.player));
        add_mul(&fj.sw_v[i], &eta, out);
    }

    fn diffusion_wbar(&self, ctx: &StepCtx, v: &[f64], vd: &[f64], out: &mut [f64]) {
        let fj = self.jacs(ctx);
        let i = self.player.index();
        out.fill(0.0);
        add_mul(&fj.swbar_x, v, out);
        add_mul(&fj.swbar_xd, vd, out);
        let eta = self.direction(ctx.t, self.parts.model.dims().n_u(self.player));
        add_mul(&fj.swbar_v[i], &eta, out);
    }
}

/// Monte Carlo estimate of one duality residual.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualEstimate {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    /// Delay-exchange residual of the forward pairing `<q, x^1>`.
    pub forward_residual: ResidualEstimate,
    /// Delay-exchange residual of the backward pairing `<p, y^1>`.
    pub backward_residual: ResidualEstimate,
    pub se_mult: f64,
    pub pass: bool,
}

/// Verifies the two delay-exchange identities behind the maximum
/// principle. Along a solution and its adjoints, with a variational pair
/// `(x^1, y^1)` driven by a control perturbation,
///
/// ```text
/// E int <q(t), b_xd(t) x^1(t-delta)> dt = E int <E_t[b_xd'(t+delta) q(t+delta)], x^1(t)> dt
/// E int <f_ya'(t-delta) p(t-delta), y^1(t)> dt = E int <p(t), E_t[f_ya(t) y^1(t+delta)]> dt
/// ```
///
/// (and likewise for the diffusion blocks in the first identity). Both
/// sides are computed with the same quadrature, truncated to grid points
/// whose shifted partner stays strictly inside the horizon, and the same
/// regression plans the solvers used, so the residual vanishes identically
/// when the delayed coefficients vanish and is pure estimation noise
/// otherwise.
#[allow(clippy::too_many_arguments)]
pub fn check_duality(
    parts: &GameParts,
    player: Player,
    candidate: &ControlPair,
    profile: &DirectionProfile,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    se_mult: f64,
) -> Result<DualityReport> {
    let dims = parts.model.dims();
    let n = grid.n_steps() as isize;
    let k_steps = grid.delay_steps() as isize;
    let h = grid.h();
    let m = paths.m_paths();

    let sol = solve_system(parts.model, candidate, grid, paths, basis)?;
    let w = paths.cumulative_w();
    let wbar = paths.cumulative_wbar();
    let features = FeatureSet::new(vec![&w, &wbar, &sol.x]);
    let adj = assemble_and_solve_adjoint(
        parts, player, &sol, candidate, grid, paths, basis, &features,
    )?;

    // Variational forward state.
    let var_fwd = VariationalForward {
        parts,
        sol: &sol,
        controls: candidate,
        player,
        profile,
        grid,
        delay_steps: k_steps,
    };
    let x1 = solve_forward_sdde(
        &var_fwd,
        &InitialPath::Constant(vec![0.0; dims.n_x]),
        grid,
        paths,
    )?;

    // Variational backward value with anticipated coupling.
    let jacs_at = |path: usize, j: isize| -> (ForwardJacs, DriverJacs) {
        let ctx = StepCtx {
            path,
            idx: j,
            t: grid.t(j),
        };
        let mut fj = ForwardJacs::zeros(&dims);
        parts.model.forward_jacs(
            &ctx,
            sol.x.at(path, j),
            sol.x.at(path, j - k_steps),
            candidate.u[0].at(path, j),
            candidate.u[1].at(path, j),
            &mut fj,
        );
        let args = DriverArgs {
            y: sol.backward.y.at(path, j),
            z: sol.backward.z.at(path, j),
            zbar: sol.backward.zbar.at(path, j),
            y_ahead: sol.backward.y.at(path, (j + k_steps).min(sol.backward.y.hi())),
        };
        let mut dj = DriverJacs::zeros(&dims);
        parts.model.driver_jacs(
            &ctx,
            sol.x.at(path, j),
            &args,
            candidate.u[0].at(path, j),
            candidate.u[1].at(path, j),
            &mut dj,
        );
        (fj, dj)
    };

    let terminal = |path: usize| -> Vec<f64> {
        let gj = parts.model.terminal_jac(sol.x.at(path, n));
        let mut out = vec![0.0; dims.n_y];
        add_mul(&gj, x1.at(path, n), &mut out);
        out
    };
    let i = player.index();
    let drift = |ctx: &StepCtx,
                 y1_next: &[f64],
                 z1: &[f64],
                 zb1: &[f64],
                 ant: &[f64],
                 out: &mut [f64]| {
        let (_, dj) = jacs_at(ctx.path, ctx.idx);
        out.fill(0.0);
        add_mul(&dj.f_x, x1.at(ctx.path, ctx.idx), out);
        add_mul(&dj.f_y, y1_next, out);
        add_mul(&dj.f_z, z1, out);
        add_mul(&dj.f_zbar, zb1, out);
        let eta = vec![profile.eval(ctx.t, grid.t_horizon()); dims.n_u(player)];
        add_mul(&dj.f_v[i], &eta, out);
        for c in 0..dims.n_y {
            out[c] += ant[c];
        }
    };
    let anticipated = |ctx: &StepCtx, view: &FutureView, out: &mut [f64]| {
        out.fill(0.0);
        let js = ctx.idx + k_steps;
        if k_steps == 0 {
            return;
        }
        let (_, dj) = jacs_at(ctx.path, ctx.idx);
        add_mul(&dj.f_yahead, view.y_at(ctx.path, js), out);
    };
    let sweep = LinearBackwardSweep {
        dim: dims.n_y,
        terminal: &terminal,
        extension: None,
        drift: &drift,
        anticipated: if k_steps > 0 { Some(&anticipated) } else { None },
        use_wbar: true,
    };
    let y1 = solve_linear_backward(&sweep, grid, paths, basis, &features)?;

    // Residuals: both sides of each exchange identity on the strict
    // interior (shifted index at most n - 1), with the anticipated side
    // re-projected on exactly the plans the solvers used.
    let mut fwd_samples = vec![0.0; m];
    let mut bwd_samples = vec![0.0; m];
    let mut feat_buf = Vec::new();
    let mut raw = vec![0.0; m * dims.n_x.max(dims.n_y)];
    let view = FutureView {
        y: &adj.q,
        k: &adj.k,
        kbar: &adj.kbar,
        n,
    };
    for s in 0..n {
        if s + k_steps > n - 1 || k_steps == 0 {
            continue;
        }
        let js = s + k_steps;
        features.gather(s, &mut feat_buf);
        let plan = basis.plan(&feat_buf, features.n_features(), m, s)?;

        // Forward pairing: raw anticipated vector at s from the adjoint.
        for p in 0..m {
            let (fj, _) = jacs_at(p, js);
            let slot = &mut raw[p * dims.n_x..(p + 1) * dims.n_x];
            slot.fill(0.0);
            add_tr_mul(&fj.b_xd, view.y_at(p, js), slot);
            add_tr_mul(&fj.sw_xd, &view.k_at(p, js), slot);
            add_tr_mul(&fj.swbar_xd, &view.kbar_at(p, js), slot);
        }
        for c in 0..dims.n_x {
            let targets: Vec<f64> = (0..m).map(|p| raw[p * dims.n_x + c]).collect();
            let fitted = plan.fit(&targets)?;
            for p in 0..m {
                let x1s = x1.component(p, s, c);
                fwd_samples[p] += h * (targets[p] - fitted[p]) * x1s;
            }
        }

        // Backward pairing: raw anticipated vector f_ya(s) y1(s + delta).
        for p in 0..m {
            let (_, dj) = jacs_at(p, s);
            let slot = &mut raw[p * dims.n_y..(p + 1) * dims.n_y];
            slot.fill(0.0);
            add_mul(&dj.f_yahead, y1.y.at(p, js), slot);
        }
        for c in 0..dims.n_y {
            let targets: Vec<f64> = (0..m).map(|p| raw[p * dims.n_y + c]).collect();
            let fitted = plan.fit(&targets)?;
            for p in 0..m {
                let ps = adj.p.component(p, s, c);
                bwd_samples[p] += h * ps * (targets[p] - fitted[p]);
            }
        }
    }

    let fwd = CostEstimate::from_samples(fwd_samples);
    let bwd = CostEstimate::from_samples(bwd_samples);
    let tol = |e: &CostEstimate| e.mean.abs() <= (se_mult * e.se).max(1e-8);
    let pass = tol(&fwd) && tol(&bwd);
    Ok(DualityReport {
        forward_residual: ResidualEstimate {
            mean: fwd.mean,
            se: fwd.se,
        },
        backward_residual: ResidualEstimate {
            mean: bwd.mean,
            se: bwd.se,
        },
        se_mult,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, LinearSystemModel, QuadraticCost, QuadraticCosts};

    fn scalar_dims() -> Dims {
        Dims {
            n_x: 1,
            n_y: 1,
            n_u1: 1,
            n_u2: 1,
        }
    }

    fn toy_parts<'a>(model: &'a LinearSystemModel, costs: &'a QuadraticCosts) -> GameParts<'a> {
        GameParts {
            model,
            costs,
        }
    }

    #[test]
    fn hamiltonian_gradient_matches_finite_differences() {
        let dims = scalar_dims();
        let mut model = LinearSystemModel::zeros(dims);
        model.bv[0][(0, 0)] = 1.5;
        model.sv[0][(0, 0)] = 0.4;
        model.fv[0][(0, 0)] = -0.7;
        model.bx[(0, 0)] = 0.3;
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.r[(0, 0)] = -2.0;
        c1.lin_v = vec![0.3];
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let ctx = StepCtx {
            path: 0,
            idx: 0,
            t: 0.0,
        };
        let (x, xd) = ([1.2], [0.8]);
        let (p, q, k, kb) = ([0.5], [1.1], [-0.2], [0.05]);
        let args = DriverArgs {
            y: &[0.3],
            z: &[0.1],
            zbar: &[0.0],
            y_ahead: &[0.0],
        };
        let grad = hamiltonian_control_gradient(
            &parts,
            Player::One,
            &ctx,
            &x,
            &xd,
            &args,
            &[0.6],
            &[0.0],
            &p,
            &q,
            &k,
            &kb,
        );
        let eps = 1e-6;
        let h_at = |u: f64| {
            hamiltonian(
                &parts,
                Player::One,
                &ctx,
                &x,
                &xd,
                &args,
                &[u],
                &[0.0],
                &p,
                &q,
                &k,
                &kb,
            )
        };
        let fd = (h_at(0.6 + eps) - h_at(0.6 - eps)) / (2.0 * eps);
        assert!(
            (grad[0] - fd).abs() < 1e-6,
            "analytic {} vs finite difference {fd}",
            grad[0]
        );
    }

    #[test]
    fn density_shaped_adjoint_is_exactly_exponential() {
        // Driver f = g z, no running cost in (y, z, zbar), initial cost
        // gradient -1: the forward adjoint is the density
        // exp(g W - g^2 t / 2), and the exponential stepping reproduces it
        // to machine precision.
        let dims = scalar_dims();
        let g = 0.3;
        let mut model = LinearSystemModel::zeros(dims);
        model.fz[(0, 0)] = g;
        model.gx[(0, 0)] = -1.0;
        model.x_init = vec![1.0];
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.lin_init = vec![-1.0];
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(1.0, 0.25, 40).unwrap();
        let paths = PathBundle::sample(&grid, 512, 11);
        let controls = ControlPair::zeros(&dims, 512, 40);
        let basis = ObservedBasis::default();
        let sol = solve_system(&model, &controls, &grid, &paths, &basis).unwrap();
        let w = paths.cumulative_w();
        let wbar = paths.cumulative_wbar();
        let features = FeatureSet::new(vec![&w, &wbar, &sol.x]);
        let adj = assemble_and_solve_adjoint(
            &parts,
            Player::One,
            &sol,
            &controls,
            &grid,
            &paths,
            &basis,
            &features,
        )
        .unwrap();
        for p in [0usize, 17, 400] {
            for j in [0isize, 13, 40] {
                let t = grid.t(j);
                let expected = (g * w.scalar(p, j) - 0.5 * g * g * t).exp();
                let got = adj.p.scalar(p, j);
                assert!(
                    (got - expected).abs() < 1e-10,
                    "path {p} idx {j}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn constant_cost_free_adjoint_backward_is_constant() {
        // With f = 0, no running cost, and a linear terminal map, q solves
        // a driverless backward equation from a terminal that does not
        // depend on the path: it must stay constant.
        let dims = scalar_dims();
        let mut model = LinearSystemModel::zeros(dims);
        model.gx[(0, 0)] = 0.0;
        model.g0 = vec![2.0];
        model.x_init = vec![1.0];
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.lin_init = vec![-1.0];
        c1.lin_term = vec![0.5];
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(1.0, 0.25, 16).unwrap();
        let paths = PathBundle::sample(&grid, 128, 4);
        let controls = ControlPair::zeros(&dims, 128, 16);
        let basis = ObservedBasis::default();
        let sol = solve_system(&model, &controls, &grid, &paths, &basis).unwrap();
        let w = paths.cumulative_w();
        let wbar = paths.cumulative_wbar();
        let features = FeatureSet::new(vec![&w, &wbar, &sol.x]);
        let adj = assemble_and_solve_adjoint(
            &parts,
            Player::One,
            &sol,
            &controls,
            &grid,
            &paths,
            &basis,
            &features,
        )
        .unwrap();
        // q(T) = Phi_x = 0.5 (G_x = 0 kills the p(T) term), and stays 0.5.
        for j in [0isize, 7, 16] {
            let qv = adj.q.scalar(3, j);
            assert!((qv - 0.5).abs() < 1e-9, "q at {j} = {qv}");
        }
    }

    #[test]
    fn quadratic_toy_cost_evaluates_exactly() {
        // l_1 = -u_1^2 (R = -2), no noise exposure: J(c) = -c^2 T.
        let dims = scalar_dims();
        let model = LinearSystemModel::zeros(dims);
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.r[(0, 0)] = -2.0;
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(2.0, 0.5, 16).unwrap();
        let paths = PathBundle::sample(&grid, 64, 6);
        let controls = ControlPair::constant(&dims, 64, 16, &[0.7], &[0.0]);
        let basis = ObservedBasis::default();
        let est = eval_cost(&parts, Player::One, &controls, &grid, &paths, &basis).unwrap();
        let expected = -0.7f64.powi(2) * 2.0;
        assert!(
            (est.mean - expected).abs() < 1e-12,
            "J = {} vs {expected}",
            est.mean
        );
        assert!(est.se < 1e-12);
    }

    #[test]
    fn nash_check_accepts_the_concave_toy_optimum_and_rejects_an_offset() {
        let dims = scalar_dims();
        let model = LinearSystemModel::zeros(dims);
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.r[(0, 0)] = -2.0;
        let mut c2 = QuadraticCost::zeros(&dims, Player::Two);
        c2.r[(0, 0)] = -2.0;
        let costs = QuadraticCosts {
            players: [c1, c2],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(1.0, 0.25, 8).unwrap();
        let paths = PathBundle::sample(&grid, 32, 9);
        let basis = ObservedBasis::default();
        let evaluator = GenericEvaluator {
            parts,
            grid: &grid,
            paths: &paths,
            basis: &basis,
        };
        let optimum = ControlPair::zeros(&dims, 32, 8);
        let report = verify_nash(&evaluator, &optimum, &grid, &NashOptions::default()).unwrap();
        assert!(report.all_pass, "optimum rejected: {report:?}");

        let offset = ControlPair::constant(&dims, 32, 8, &[0.3], &[0.0]);
        let report = verify_nash(&evaluator, &offset, &grid, &NashOptions::default()).unwrap();
        assert!(!report.all_pass, "offset accepted: {report:?}");
        // The improving deviation is the one pushing u back toward zero.
        let improving = report
            .deviations
            .iter()
            .find(|d| d.player == 1 && d.profile == "constant(-1)" && d.epsilon == 0.1)
            .unwrap();
        assert!(improving.delta_mean > 0.0);
    }

    #[test]
    fn perturbation_with_zero_epsilon_is_bit_identical() {
        let dims = scalar_dims();
        let grid = TimeGrid::new(1.0, 0.25, 8).unwrap();
        let candidate = ControlPair::constant(&dims, 16, 8, &[0.4], &[0.2]);
        let shifted = perturbed_controls(
            &candidate,
            Player::One,
            &DirectionProfile::Sine,
            0.0,
            &grid,
        );
        assert_eq!(candidate.u[0], shifted.u[0]);
        assert_eq!(candidate.u[1], shifted.u[1]);
    }

    #[test]
    fn first_order_battery_flags_a_visibly_suboptimal_control() {
        // Same concave toy: H_v = -2u, so u = 0.3 gives a constant-moment
        // z-score far beyond any threshold while u = 0 stays at zero.
        let dims = scalar_dims();
        let model = LinearSystemModel::zeros(dims);
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.r[(0, 0)] = -2.0;
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(1.0, 0.25, 8).unwrap();
        let paths = PathBundle::sample(&grid, 64, 10);
        let basis = ObservedBasis::default();
        let optimum = ControlPair::zeros(&dims, 64, 8);
        let rep =
            check_first_order(
                &parts,
                Player::One,
                &optimum,
                &grid,
                &paths,
                &basis,
                Conditioning::FullNoise,
                3.0,
            )
            .unwrap();
        assert!(rep.pass, "optimum flagged: max |z| = {}", rep.max_abs_z);

        let offset = ControlPair::constant(&dims, 64, 8, &[0.3], &[0.0]);
        let rep = check_first_order(
            &parts,
            Player::One,
            &offset,
            &grid,
            &paths,
            &basis,
            Conditioning::FullNoise,
            3.0,
        )
        .unwrap();
        assert!(!rep.pass);
        assert!(
            rep.max_abs_z >= 5.0,
            "offset too quiet: max |z| = {}",
            rep.max_abs_z
        );
    }

    #[test]
    fn duality_residuals_vanish_identically_without_delay_coupling() {
        let dims = scalar_dims();
        let mut model = LinearSystemModel::zeros(dims);
        model.bx[(0, 0)] = 0.5;
        model.sx[(0, 0)] = 0.3;
        model.bv[0][(0, 0)] = 1.0;
        model.fz[(0, 0)] = 0.2;
        model.gx[(0, 0)] = -1.0;
        model.x_init = vec![1.0];
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.r[(0, 0)] = -1.0;
        c1.o[(0, 0)] = -0.5;
        c1.lin_init = vec![-1.0];
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(1.0, 0.25, 16).unwrap();
        let paths = PathBundle::sample(&grid, 256, 12);
        let basis = ObservedBasis::default();
        let candidate = ControlPair::constant(&dims, 256, 16, &[0.1], &[0.0]);
        let rep = check_duality(
            &parts,
            Player::One,
            &candidate,
            &DirectionProfile::Constant(1.0),
            &grid,
            &paths,
            &basis,
            3.0,
        )
        .unwrap();
        assert_eq!(rep.forward_residual.mean, 0.0);
        assert_eq!(rep.backward_residual.mean, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn duality_residuals_vanish_for_deterministic_delayed_dynamics() {
        // Delay coupling present but zero noise: regressions of constants
        // are exact, so both residuals must vanish to machine precision.
        let dims = scalar_dims();
        let mut model = LinearSystemModel::zeros(dims);
        model.bx[(0, 0)] = 0.2;
        model.bxd[(0, 0)] = 0.4;
        model.bv[0][(0, 0)] = 1.0;
        model.fyd[(0, 0)] = 0.3;
        model.gx[(0, 0)] = -1.0;
        model.x_init = vec![1.0];
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.r[(0, 0)] = -1.0;
        c1.lin_init = vec![-1.0];
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(1.0, 0.25, 16).unwrap();
        let paths = PathBundle::sample(&grid, 64, 13);
        let basis = ObservedBasis::default();
        let candidate = ControlPair::constant(&dims, 64, 16, &[0.2], &[0.0]);
        let rep = check_duality(
            &parts,
            Player::One,
            &candidate,
            &DirectionProfile::Ramp,
            &grid,
            &paths,
            &basis,
            3.0,
        )
        .unwrap();
        assert!(
            rep.forward_residual.mean.abs() < 1e-10,
            "forward residual {}",
            rep.forward_residual.mean
        );
        assert!(
            rep.backward_residual.mean.abs() < 1e-10,
            "backward residual {}",
            rep.backward_residual.mean
        );
    }

    #[test]
    fn duality_residuals_stay_within_noise_for_a_random_linear_model() {
        let dims = scalar_dims();
        let mut model = LinearSystemModel::zeros(dims);
        model.bx[(0, 0)] = 0.31;
        model.bxd[(0, 0)] = -0.27;
        model.sx[(0, 0)] = 0.21;
        model.sxd[(0, 0)] = 0.13;
        model.sbx[(0, 0)] = 0.11;
        model.sbxd[(0, 0)] = -0.09;
        model.bv[0][(0, 0)] = 1.0;
        model.fx[(0, 0)] = 0.17;
        model.fy[(0, 0)] = -0.23;
        model.fz[(0, 0)] = 0.19;
        model.fzbar[(0, 0)] = 0.07;
        model.fyd[(0, 0)] = 0.29;
        model.gx[(0, 0)] = -0.8;
        model.x_init = vec![1.0];
        let mut c1 = QuadraticCost::zeros(&dims, Player::One);
        c1.r[(0, 0)] = -1.0;
        c1.o[(0, 0)] = -0.4;
        c1.lin_init = vec![-1.0];
        let costs = QuadraticCosts {
            players: [c1, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let parts = toy_parts(&model, &costs);
        let grid = TimeGrid::new(1.0, 0.25, 32).unwrap();
        let paths = PathBundle::sample(&grid, 4_000, 14);
        let basis = ObservedBasis::default();
        let candidate = ControlPair::constant(&dims, 4_000, 32, &[0.1], &[0.0]);
        let rep = check_duality(
            &parts,
            Player::One,
            &candidate,
            &DirectionProfile::Sine,
            &grid,
            &paths,
            &basis,
            3.0,
        )
        .unwrap();
        assert!(rep.pass, "residuals out of noise band: {rep:?}");
        assert!(rep.forward_residual.se > 0.0);
    }
}
