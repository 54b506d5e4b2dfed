//! The coupled model interface: forward coefficients, backward driver,
//! their partial derivatives, and per-player cost functionals.
//!
//! Solvers and verification routines see a model only through
//! [`SystemModel`] and [`CostModel`], so the linear-quadratic game, the
//! pension fund, and the randomized linear models of the test suites all
//! run through the same code paths. The forward state `x` has a delayed
//! read `x(t - delta)`, the backward value `y` an anticipated read
//! `E_t[y(t + delta)]`; both players steer through their own control block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::backward::BackwardSolution;
use crate::engine::{FeatureSet, ObservedBasis, PathBundle, TimeGrid};
use crate::error::Result;
use crate::forward::{InitialPath, SddeCoeffs, StepCtx, solve_forward_sdde};
use crate::trajectory::Trajectory;

/// Problem dimensions: state, backward value, and the two control blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_y: usize,
    pub n_u1: usize,
    pub n_u2: usize,
}

impl Dims {
    pub fn n_u(&self, player: Player) -> usize {
        match player {
            Player::One => self.n_u1,
            Player::Two => self.n_u2,
        }
    }
}

/// Player tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub const BOTH: [Player; 2] = [Player::One, Player::Two];

    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }

    pub fn other(self) -> Player {
        match self {
            Player::One => Player::Two,
            Player::Two => Player::One,
        }
    }
}

impl std::fmt::Display for Player {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index() + 1)
    }
}

/// Convex admissible set for one control block.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    /// No constraint.
    All,
    /// Componentwise bounds.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Componentwise `v >= floor` (consumption-style constraints).
    AtLeast(f64),
}

impl ConvexSet {
    pub fn contains(&self, v: &[f64]) -> bool {
        match self {
            ConvexSet::All => true,
            ConvexSet::Box { lo, hi } => v
                .iter()
                .enumerate()
                .all(|(c, u)| *u >= lo[c] && *u <= hi[c]),
            ConvexSet::AtLeast(floor) => v.iter().all(|u| *u >= *floor),
        }
    }

    /// Euclidean projection onto the set, componentwise.
    pub fn project(&self, v: &mut [f64]) {
        match self {
            ConvexSet::All => {}
            ConvexSet::Box { lo, hi } => {
                for (c, u) in v.iter_mut().enumerate() {
                    *u = u.clamp(lo[c], hi[c]);
                }
            }
            ConvexSet::AtLeast(floor) => {
                for u in v.iter_mut() {
                    *u = u.max(*floor);
                }
            }
        }
    }
}

/// Both players' controls as per-path grid functions on `[0, n]`, with
/// their admissible sets.
#[derive(Debug, Clone)]
pub struct ControlPair {
    pub u: [Trajectory; 2],
    pub admissible: [ConvexSet; 2],
}

impl ControlPair {
    pub fn zeros(dims: &Dims, m_paths: usize, n_steps: usize) -> Self {
        ControlPair {
            u: [
                Trajectory::zeros(m_paths, dims.n_u1.max(1), 0, n_steps as isize),
                Trajectory::zeros(m_paths, dims.n_u2.max(1), 0, n_steps as isize),
            ],
            admissible: [ConvexSet::All, ConvexSet::All],
        }
    }

    /// Constant-in-time, constant-across-paths controls.
    pub fn constant(dims: &Dims, m_paths: usize, n_steps: usize, v1: &[f64], v2: &[f64]) -> Self {
        let mut pair = Self::zeros(dims, m_paths, n_steps);
        for p in 0..m_paths {
            for j in 0..=n_steps as isize {
                pair.u[0].set(p, j, v1);
                pair.u[1].set(p, j, v2);
            }
        }
        pair
    }

    pub fn of(&self, player: Player) -> &Trajectory {
        &self.u[player.index()]
    }

    pub fn of_mut(&mut self, player: Player) -> &mut Trajectory {
        &mut self.u[player.index()]
    }

    /// Both controls restricted to `count` consecutive paths starting at
    /// `start`, aligned with [`crate::engine::PathBundle::sub_paths`].
    pub fn sub_paths(&self, start: usize, count: usize) -> ControlPair {
        ControlPair {
            u: [
                self.u[0].sub_paths(start, count),
                self.u[1].sub_paths(start, count),
            ],
            admissible: self.admissible.clone(),
        }
    }

    /// Both controls with the path range `[start, start + count)` removed,
    /// aligned with [`crate::engine::PathBundle::without_paths`].
    pub fn without_paths(&self, start: usize, count: usize) -> ControlPair {
        ControlPair {
            u: [
                self.u[0].without_paths(start, count),
                self.u[1].without_paths(start, count),
            ],
            admissible: self.admissible.clone(),
        }
    }
}

/// Forward coefficient values at one point.
#[derive(Debug, Clone)]
pub struct ForwardVals {
    pub b: Vec<f64>,
    pub sw: Vec<f64>,
    pub swbar: Vec<f64>,
}

impl ForwardVals {
    pub fn zeros(n_x: usize) -> Self {
        ForwardVals {
            b: vec![0.0; n_x],
            sw: vec![0.0; n_x],
            swbar: vec![0.0; n_x],
        }
    }
}

/// Partial derivatives of the forward coefficients. Shapes: state blocks
/// `n_x x n_x`, control blocks `n_x x n_ui`.
#[derive(Debug, Clone)]
pub struct ForwardJacs {
    pub b_x: DMatrix<f64>,
    pub b_xd: DMatrix<f64>,
    pub b_v: [DMatrix<f64>; 2],
    pub sw_x: DMatrix<f64>,
    pub sw_xd: DMatrix<f64>,
    pub sw_v: [DMatrix<f64>; 2],
    pub swbar_x: DMatrix<f64>,
    pub swbar_xd: DMatrix<f64>,
    pub swbar_v: [DMatrix<f64>; 2],
}

impl ForwardJacs {
    pub fn zeros(dims: &Dims) -> Self {
        let sq = || DMatrix::zeros(dims.n_x, dims.n_x);
        let v = || [
            DMatrix::zeros(dims.n_x, dims.n_u1),
            DMatrix::zeros(dims.n_x, dims.n_u2),
        ];
        ForwardJacs {
            b_x: sq(),
            b_xd: sq(),
            b_v: v(),
            sw_x: sq(),
            sw_xd: sq(),
            sw_v: v(),
            swbar_x: sq(),
            swbar_xd: sq(),
            swbar_v: v(),
        }
    }
}

/// Backward arguments at one point (explicit scheme: `y` is one step
/// ahead, `y_ahead` is the anticipated estimate).
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs<'a> {
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub zbar: &'a [f64],
    pub y_ahead: &'a [f64],
}

/// Partial derivatives of the backward driver. Shapes: `n_y x n_x` for the
/// state block, `n_y x n_y` for value blocks, `n_y x n_ui` for controls.
#[derive(Debug, Clone)]
pub struct DriverJacs {
    pub f_x: DMatrix<f64>,
    pub f_y: DMatrix<f64>,
    pub f_z: DMatrix<f64>,
    pub f_zbar: DMatrix<f64>,
    pub f_yahead: DMatrix<f64>,
    pub f_v: [DMatrix<f64>; 2],
}

impl DriverJacs {
    pub fn zeros(dims: &Dims) -> Self {
        DriverJacs {
            f_x: DMatrix::zeros(dims.n_y, dims.n_x),
            f_y: DMatrix::zeros(dims.n_y, dims.n_y),
            f_z: DMatrix::zeros(dims.n_y, dims.n_y),
            f_zbar: DMatrix::zeros(dims.n_y, dims.n_y),
            f_yahead: DMatrix::zeros(dims.n_y, dims.n_y),
            f_v: [
                DMatrix::zeros(dims.n_y, dims.n_u1),
                DMatrix::zeros(dims.n_y, dims.n_u2),
            ],
        }
    }
}

/// The coupled forward-backward model with evaluable partial derivatives.
pub trait SystemModel {
    fn dims(&self) -> Dims;

    fn forward_vals(
        &self,
        ctx: &StepCtx,
        x: &[f64],
        x_delay: &[f64],
        u1: &[f64],
        u2: &[f64],
        out: &mut ForwardVals,
    );

    fn forward_jacs(
        &self,
        ctx: &StepCtx,
        x: &[f64],
        x_delay: &[f64],
        u1: &[f64],
        u2: &[f64],
        out: &mut ForwardJacs,
    );

    fn driver_vals(
        &self,
        ctx: &StepCtx,
        x: &[f64],
        args: &DriverArgs,
        u1: &[f64],
        u2: &[f64],
        out: &mut [f64],
    );

    fn driver_jacs(
        &self,
        ctx: &StepCtx,
        x: &[f64],
        args: &DriverArgs,
        u1: &[f64],
        u2: &[f64],
        out: &mut DriverJacs,
    );

    /// Terminal map `y(T) = G(x(T))`.
    fn terminal_map(&self, x: &[f64]) -> Vec<f64>;

    /// Jacobian of the terminal map, `n_y x n_x`.
    fn terminal_jac(&self, x: &[f64]) -> DMatrix<f64>;

    /// Initial state on `[-delay_steps, 0]` (index and time supplied so
    /// zero-history initials can distinguish `t = 0` from `t < 0`).
    fn initial_state(&self, idx: isize, t: f64) -> Vec<f64>;

    /// Deterministic backward extension on `(T, T + delta]`.
    fn backward_extension(&self, t: f64) -> Vec<f64> {
        let _ = t;
        vec![0.0; self.dims().n_y]
    }
}

/// Per-player running, terminal, and initial cost terms with gradients.
pub trait CostModel {
    #[allow(clippy::too_many_arguments)]
    fn running(
        &self,
        player: Player,
        ctx: &StepCtx,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zbar: &[f64],
        u1: &[f64],
        u2: &[f64],
    ) -> f64;

    #[allow(clippy::too_many_arguments)]
    fn running_grads(
        &self,
        player: Player,
        ctx: &StepCtx,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zbar: &[f64],
        u1: &[f64],
        u2: &[f64],
        out: &mut CostGrads,
    );

    /// Terminal term `Phi_i(x(T))`.
    fn terminal(&self, player: Player, x: &[f64]) -> f64;

    fn terminal_grad(&self, player: Player, x: &[f64]) -> Vec<f64>;

    /// Initial term `gamma_i(y(0))`.
    fn initial(&self, player: Player, y0: &[f64]) -> f64;

    fn initial_grad(&self, player: Player, y0: &[f64]) -> Vec<f64>;
}

/// Gradients of a running cost at one point; `l_v` is with respect to the
/// differentiating player's own control.
#[derive(Debug, Clone)]
pub struct CostGrads {
    pub l_x: Vec<f64>,
    pub l_y: Vec<f64>,
    pub l_z: Vec<f64>,
    pub l_zbar: Vec<f64>,
    pub l_v: Vec<f64>,
}

impl CostGrads {
    pub fn zeros(dims: &Dims, player: Player) -> Self {
        CostGrads {
            l_x: vec![0.0; dims.n_x],
            l_y: vec![0.0; dims.n_y],
            l_z: vec![0.0; dims.n_y],
            l_zbar: vec![0.0; dims.n_y],
            l_v: vec![0.0; dims.n_u(player)],
        }
    }
}

/// Forward coefficients of a model under fixed controls, in the shape the
/// Euler solver consumes.
pub struct ControlledForward<'a> {
    pub model: &'a dyn SystemModel,
    pub controls: &'a ControlPair,
}

impl SddeCoeffs for ControlledForward<'_> {
    fn dim(&self) -> usize {
        self.model.dims().n_x
    }

    fn drift(&self, ctx: &StepCtx, x: &[f64], x_delay: &[f64], out: &mut [f64]) {
        let mut vals = ForwardVals::zeros(self.dim());
        self.model.forward_vals(
            ctx,
            x,
            x_delay,
            self.controls.u[0].at(ctx.path, ctx.idx),
            self.controls.u[1].at(ctx.path, ctx.idx),
            &mut vals,
        );
        out.copy_from_slice(&vals.b);
    }

    fn diffusion_w(&self, ctx: &StepCtx, x: &[f64], x_delay: &[f64], out: &mut [f64]) {
        let mut vals = ForwardVals::zeros(self.dim());
        self.model.forward_vals(
            ctx,
            x,
            x_delay,
            self.controls.u[0].at(ctx.path, ctx.idx),
            self.controls.u[1].at(ctx.path, ctx.idx),
            &mut vals,
        );
        out.copy_from_slice(&vals.sw);
    }

    fn diffusion_wbar(&self, ctx: &StepCtx, x: &[f64], x_delay: &[f64], out: &mut [f64]) {
        let mut vals = ForwardVals::zeros(self.dim());
        self.model.forward_vals(
            ctx,
            x,
            x_delay,
            self.controls.u[0].at(ctx.path, ctx.idx),
            self.controls.u[1].at(ctx.path, ctx.idx),
            &mut vals,
        );
        out.copy_from_slice(&vals.swbar);
    }
}

/// Solves the forward equation of a model under the given controls.
pub fn solve_model_forward(
    model: &dyn SystemModel,
    controls: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
) -> Result<Trajectory> {
    let coeffs = ControlledForward { model, controls };
    let init = |t: f64| -> Vec<f64> {
        // Index reconstructed from time; exact because initial_state only
        // branches on the sign.
        let idx = if t < 0.0 { -1 } else { 0 };
        model.initial_state(idx, t)
    };
    let init = InitialPath::Fn(&init);
    solve_forward_sdde(&coeffs, &init, grid, paths)
}

/// Fully linear model: every coefficient is affine in its arguments with
/// constant matrices. This is the workhorse of the adjoint and duality
/// test batteries, and rich enough to express delayed diffusion and
/// anticipated driver coupling.
#[derive(Debug, Clone)]
pub struct LinearSystemModel {
    pub dims: Dims,
    // Forward drift: b0 + bx x + bxd x_delay + bv1 u1 + bv2 u2.
    pub b0: Vec<f64>,
    pub bx: DMatrix<f64>,
    pub bxd: DMatrix<f64>,
    pub bv: [DMatrix<f64>; 2],
    // Observed diffusion.
    pub s0: Vec<f64>,
    pub sx: DMatrix<f64>,
    pub sxd: DMatrix<f64>,
    pub sv: [DMatrix<f64>; 2],
    // Unobserved diffusion.
    pub sb0: Vec<f64>,
    pub sbx: DMatrix<f64>,
    pub sbxd: DMatrix<f64>,
    pub sbv: [DMatrix<f64>; 2],
    // Driver: f0 + fx x + fy y + fz z + fzbar zbar + fyd y_ahead + fv1 u1 + fv2 u2.
    pub f0: Vec<f64>,
    pub fx: DMatrix<f64>,
    pub fy: DMatrix<f64>,
    pub fz: DMatrix<f64>,
    pub fzbar: DMatrix<f64>,
    pub fyd: DMatrix<f64>,
    pub fv: [DMatrix<f64>; 2],
    // Terminal map G(x) = g0 + gx x.
    pub g0: Vec<f64>,
    pub gx: DMatrix<f64>,
    /// Constant initial state on `[-delta, 0]`.
    pub x_init: Vec<f64>,
    /// Constant backward extension on `(T, T + delta]`.
    pub y_ext: Vec<f64>,
}

impl LinearSystemModel {
    /// A model with every coefficient zero; callers fill in what they need.
    pub fn zeros(dims: Dims) -> Self {
        let nx = dims.n_x;
        let ny = dims.n_y;
        let sq = || DMatrix::zeros(nx, nx);
        let vmat = || [
            DMatrix::zeros(nx, dims.n_u1),
            DMatrix::zeros(nx, dims.n_u2),
        ];
        LinearSystemModel {
            dims,
            b0: vec![0.0; nx],
            bx: sq(),
            bxd: sq(),
            bv: vmat(),
            s0: vec![0.0; nx],
            sx: sq(),
            sxd: sq(),
            sv: vmat(),
            sb0: vec![0.0; nx],
            sbx: sq(),
            sbxd: sq(),
            sbv: vmat(),
            f0: vec![0.0; ny],
            fx: DMatrix::zeros(ny, nx),
            fy: DMatrix::zeros(ny, ny),
            fz: DMatrix::zeros(ny, ny),
            fzbar: DMatrix::zeros(ny, ny),
            fyd: DMatrix::zeros(ny, ny),
            fv: [
                DMatrix::zeros(ny, dims.n_u1),
                DMatrix::zeros(ny, dims.n_u2),
            ],
            g0: vec![0.0; ny],
            gx: DMatrix::zeros(ny, nx),
            x_init: vec![0.0; nx],
            y_ext: vec![0.0; ny],
        }
    }
}

fn affine(out: &mut [f64], c0: &[f64], terms: &[(&DMatrix<f64>, &[f64])]) {
    out.copy_from_slice(c0);
    for (mat, vec) in terms {
        for r in 0..mat.nrows() {
            let mut acc = 0.0;
            for c in 0..mat.ncols() {
                acc += mat[(r, c)] * vec[c];
            }
            out[r] += acc;
        }
    }
}

impl SystemModel for LinearSystemModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn forward_vals(
        &self,
        _ctx: &StepCtx,
        x: &[f64],
        xd: &[f64],
        u1: &[f64],
        u2: &[f64],
        out: &mut ForwardVals,
    ) {
        affine(
            &mut out.b,
            &self.b0,
            &[(&self.bx, x), (&self.bxd, xd), (&self.bv[0], u1), (&self.bv[1], u2)],
        );
        affine(
            &mut out.sw,
            &self.s0,
            &[(&self.sx, x), (&self.sxd, xd), (&self.sv[0], u1), (&self.sv[1], u2)],
        );
        affine(
            &mut out.swbar,
            &self.sb0,
            &[(&self.sbx, x), (&self.sbxd, xd), (&self.sbv[0], u1), (&self.sbv[1], u2)],
        );
    }

    fn forward_jacs(
        &self,
        _ctx: &StepCtx,
        _x: &[f64],
        _xd: &[f64],
        _u1: &[f64],
        _u2: &[f64],
        out: &mut ForwardJacs,
    ) {
        out.b_x.copy_from(&self.bx);
        out.b_xd.copy_from(&self.bxd);
        out.b_v[0].copy_from(&self.bv[0]);
        out.b_v[1].copy_from(&self.bv[1]);
        out.sw_x.copy_from(&self.sx);
        out.sw_xd.copy_from(&self.sxd);
        out.sw_v[0].copy_from(&self.sv[0]);
        out.sw_v[1].copy_from(&self.sv[1]);
        out.swbar_x.copy_from(&self.sbx);
        out.swbar_xd.copy_from(&self.sbxd);
        out.swbar_v[0].copy_from(&self.sbv[0]);
        out.swbar_v[1].copy_from(&self.sbv[1]);
    }

    fn driver_vals(
        &self,
        _ctx: &StepCtx,
        x: &[f64],
        args: &DriverArgs,
        u1: &[f64],
        u2: &[f64],
        out: &mut [f64],
    ) {
        affine(
            out,
            &self.f0,
            &[
                (&self.fx, x),
                (&self.fy, args.y),
                (&self.fz, args.z),
                (&self.fzbar, args.zbar),
                (&self.fyd, args.y_ahead),
                (&self.fv[0], u1),
                (&self.fv[1], u2),
            ],
        );
    }

    fn driver_jacs(
        &self,
        _ctx: &StepCtx,
        _x: &[f64],
        _args: &DriverArgs,
        _u1: &[f64],
        _u2: &[f64],
        out: &mut DriverJacs,
    ) {
        out.f_x.copy_from(&self.fx);
        out.f_y.copy_from(&self.fy);
        out.f_z.copy_from(&self.fz);
        out.f_zbar.copy_from(&self.fzbar);
        out.f_yahead.copy_from(&self.fyd);
        out.f_v[0].copy_from(&self.fv[0]);
        out.f_v[1].copy_from(&self.fv[1]);
    }

    fn terminal_map(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.n_y];
        affine(&mut out, &self.g0, &[(&self.gx, x)]);
        out
    }

    fn terminal_jac(&self, _x: &[f64]) -> DMatrix<f64> {
        self.gx.clone()
    }

    fn initial_state(&self, _idx: isize, _t: f64) -> Vec<f64> {
        self.x_init.clone()
    }

    fn backward_extension(&self, _t: f64) -> Vec<f64> {
        self.y_ext.clone()
    }
}

/// Quadratic cost of one player:
/// `l = (x'Ox + y'Py + z'Qz + zbar'Qb zbar + v'Rv)/2 + lin_v'v`,
/// `Phi = x'Mx/2 + lin_term'x`, `gamma = y'Ny/2 + lin_init'y`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub o: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub qbar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lin_v: Vec<f64>,
    pub m_term: DMatrix<f64>,
    pub lin_term: Vec<f64>,
    pub n_init: DMatrix<f64>,
    pub lin_init: Vec<f64>,
}

impl QuadraticCost {
    pub fn zeros(dims: &Dims, player: Player) -> Self {
        let nu = dims.n_u(player);
        QuadraticCost {
            o: DMatrix::zeros(dims.n_x, dims.n_x),
            p: DMatrix::zeros(dims.n_y, dims.n_y),
            q: DMatrix::zeros(dims.n_y, dims.n_y),
            qbar: DMatrix::zeros(dims.n_y, dims.n_y),
            r: DMatrix::zeros(nu, nu),
            lin_v: vec![0.0; nu],
            m_term: DMatrix::zeros(dims.n_x, dims.n_x),
            lin_term: vec![0.0; dims.n_x],
            n_init: DMatrix::zeros(dims.n_y, dims.n_y),
            lin_init: vec![0.0; dims.n_y],
        }
    }
}

fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            acc += v[r] * m[(r, c)] * v[c];
        }
    }
    acc
}

/// Gradient of `v' M v / 2` for symmetric `M`: `(M + M')v / 2`.
fn quad_grad(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for r in 0..m.nrows() {
        let mut acc = 0.0;
        for c in 0..m.ncols() {
            acc += 0.5 * (m[(r, c)] + m[(c, r)]) * v[c];
        }
        out[r] = acc;
    }
}

/// Pair of quadratic costs implementing [`CostModel`].
#[derive(Debug, Clone)]
pub struct QuadraticCosts {
    pub players: [QuadraticCost; 2],
}

impl CostModel for QuadraticCosts {
    fn running(
        &self,
        player: Player,
        _ctx: &StepCtx,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zbar: &[f64],
        u1: &[f64],
        u2: &[f64],
    ) -> f64 {
        let c = &self.players[player.index()];
        let own = match player {
            Player::One => u1,
            Player::Two => u2,
        };
        let lin: f64 = c.lin_v.iter().zip(own).map(|(a, b)| a * b).sum();
        0.5 * (quad_form(&c.o, x)
            + quad_form(&c.p, y)
            + quad_form(&c.q, z)
            + quad_form(&c.qbar, zbar)
            + quad_form(&c.r, own))
            + lin
    }

    fn running_grads(
        &self,
        player: Player,
        _ctx: &StepCtx,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zbar: &[f64],
        u1: &[f64],
        u2: &[f64],
        out: &mut CostGrads,
    ) {
        let c = &self.players[player.index()];
        let own = match player {
            Player::One => u1,
            Player::Two => u2,
        };
        quad_grad(&c.o, x, &mut out.l_x);
        quad_grad(&c.p, y, &mut out.l_y);
        quad_grad(&c.q, z, &mut out.l_z);
        quad_grad(&c.qbar, zbar, &mut out.l_zbar);
        quad_grad(&c.r, own, &mut out.l_v);
        for (g, l) in out.l_v.iter_mut().zip(&c.lin_v) {
            *g += l;
        }
    }

    fn terminal(&self, player: Player, x: &[f64]) -> f64 {
        let c = &self.players[player.index()];
        let lin: f64 = c.lin_term.iter().zip(x).map(|(a, b)| a * b).sum();
        0.5 * quad_form(&c.m_term, x) + lin
    }

    fn terminal_grad(&self, player: Player, x: &[f64]) -> Vec<f64> {
        let c = &self.players[player.index()];
        let mut out = vec![0.0; x.len()];
        quad_grad(&c.m_term, x, &mut out);
        for (g, l) in out.iter_mut().zip(&c.lin_term) {
            *g += l;
        }
        out
    }

    fn initial(&self, player: Player, y0: &[f64]) -> f64 {
        let c = &self.players[player.index()];
        let lin: f64 = c.lin_init.iter().zip(y0).map(|(a, b)| a * b).sum();
        0.5 * quad_form(&c.n_init, y0) + lin
    }

    fn initial_grad(&self, player: Player, y0: &[f64]) -> Vec<f64> {
        let c = &self.players[player.index()];
        let mut out = vec![0.0; y0.len()];
        quad_grad(&c.n_init, y0, &mut out);
        for (g, l) in out.iter_mut().zip(&c.lin_init) {
            *g += l;
        }
        out
    }
}

/// Driver adapter running a model's backward equation under fixed controls.
pub struct ModelDriver<'a> {
    pub model: &'a dyn SystemModel,
    pub controls: &'a ControlPair,
}

impl crate::backward::BackwardDriver for ModelDriver<'_> {
    fn dim_y(&self) -> usize {
        self.model.dims().n_y
    }

    fn eval(
        &self,
        ctx: &StepCtx,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zbar: &[f64],
        y_ahead: &[f64],
        out: &mut [f64],
    ) {
        let args = DriverArgs {
            y,
            z,
            zbar,
            y_ahead,
        };
        self.model.driver_vals(
            ctx,
            x,
            &args,
            self.controls.u[0].at(ctx.path, ctx.idx),
            self.controls.u[1].at(ctx.path, ctx.idx),
            out,
        );
    }
}

/// Forward state plus backward triple under one control pair.
#[derive(Debug, Clone)]
pub struct SystemSolution {
    pub x: Trajectory,
    pub backward: BackwardSolution,
}

/// Solves the coupled system under fixed controls: forward Euler first,
/// then the anticipated backward sweep with features `(W, Wbar, x)`.
pub fn solve_system(
    model: &dyn SystemModel,
    controls: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
) -> Result<SystemSolution> {
    solve_system_with(model, controls, grid, paths, basis, Conditioning::FullNoise)
}

/// Driving paths available to the conditional-expectation regressions,
/// alongside the state. The regressions realize projections, not exact
/// conditionals, so a solver and any check of its output must share one
/// feature set: systems adapted to the observed motion should condition
/// on it alone, matching the filtered solvers built on the same basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Features `(W, x)`.
    Observed,
    /// Features `(W, Wbar, x)`.
    FullNoise,
}

/// [`solve_system`] with an explicit choice of regression features.
pub fn solve_system_with(
    model: &dyn SystemModel,
    controls: &ControlPair,
    grid: &TimeGrid,
    paths: &PathBundle,
    basis: &ObservedBasis,
    conditioning: Conditioning,
) -> Result<SystemSolution> {
    let x = solve_model_forward(model, controls, grid, paths)?;
    let w = paths.cumulative_w();
    let wbar = paths.cumulative_wbar();
    let features = match conditioning {
        Conditioning::Observed => FeatureSet::new(vec![&w, &x]),
        Conditioning::FullNoise => FeatureSet::new(vec![&w, &wbar, &x]),
    };
    let driver = ModelDriver { model, controls };
    let ext = |t: f64| model.backward_extension(t);
    let problem = crate::backward::BackwardProblem {
        driver: &driver,
        terminal: crate::backward::Terminal::FromState(&|xt: &[f64]| model.terminal_map(xt)),
        extension: Some(&ext),
        anticipated: true,
    };
    let backward = crate::backward::solve_absde(&problem, Some(&x), grid, paths, basis, &features)?;
    Ok(SystemSolution { x, backward })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_dims() -> Dims {
        Dims {
            n_x: 1,
            n_y: 1,
            n_u1: 1,
            n_u2: 1,
        }
    }

    #[test]
    fn linear_model_evaluates_its_affine_pieces() {
        let mut m = LinearSystemModel::zeros(scalar_dims());
        m.b0 = vec![0.5];
        m.bx[(0, 0)] = 2.0;
        m.bxd[(0, 0)] = -1.0;
        m.bv[0][(0, 0)] = 3.0;
        m.fy[(0, 0)] = 4.0;
        m.fyd[(0, 0)] = 0.25;
        let ctx = StepCtx {
            path: 0,
            idx: 0,
            t: 0.0,
        };
        let mut vals = ForwardVals::zeros(1);
        m.forward_vals(&ctx, &[1.0], &[2.0], &[10.0], &[0.0], &mut vals);
        assert_eq!(vals.b[0], 0.5 + 2.0 - 2.0 + 30.0);
        let args = DriverArgs {
            y: &[1.0],
            z: &[0.0],
            zbar: &[0.0],
            y_ahead: &[8.0],
        };
        let mut f = vec![0.0];
        m.driver_vals(&ctx, &[0.0], &args, &[0.0], &[0.0], &mut f);
        assert_eq!(f[0], 4.0 + 2.0);
    }

    #[test]
    fn quadratic_cost_gradients_match_finite_differences() {
        let dims = scalar_dims();
        let mut c = QuadraticCost::zeros(&dims, Player::One);
        c.o[(0, 0)] = 1.5;
        c.r[(0, 0)] = -2.0;
        c.lin_v = vec![0.7];
        let costs = QuadraticCosts {
            players: [c, QuadraticCost::zeros(&dims, Player::Two)],
        };
        let ctx = StepCtx {
            path: 0,
            idx: 0,
            t: 0.0,
        };
        let x = [1.3];
        let u1 = [0.4];
        let base = costs.running(Player::One, &ctx, &x, &[0.0], &[0.0], &[0.0], &u1, &[0.0]);
        let eps = 1e-6;
        let bump = costs.running(
            Player::One,
            &ctx,
            &x,
            &[0.0],
            &[0.0],
            &[0.0],
            &[u1[0] + eps],
            &[0.0],
        );
        let fd = (bump - base) / eps;
        let mut grads = CostGrads::zeros(&dims, Player::One);
        costs.running_grads(
            Player::One,
            &ctx,
            &x,
            &[0.0],
            &[0.0],
            &[0.0],
            &u1,
            &[0.0],
            &mut grads,
        );
        assert!((grads.l_v[0] - fd).abs() < 1e-5, "{} vs {fd}", grads.l_v[0]);
    }

    #[test]
    fn convex_sets_project_componentwise() {
        let mut v = vec![-0.5, 2.0];
        ConvexSet::Box {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        }
        .project(&mut v);
        assert_eq!(v, vec![0.0, 1.0]);
        let mut w = vec![-3.0];
        ConvexSet::AtLeast(1e-8).project(&mut w);
        assert!(ConvexSet::AtLeast(1e-8).contains(&w));
    }

    #[test]
    fn solve_system_couples_forward_and_backward() {
        // dx = u1 dt with u1 = 1: x(T) = x0 + T; terminal y = -x(T), zero
        // driver: y(0) must be near -(x0 + T).
        let dims = scalar_dims();
        let mut m = LinearSystemModel::zeros(dims);
        m.bv[0][(0, 0)] = 1.0;
        m.gx[(0, 0)] = -1.0;
        m.x_init = vec![0.5];
        let grid = TimeGrid::new(1.0, 0.25, 20).unwrap();
        let paths = PathBundle::sample(&grid, 256, 3);
        let controls = ControlPair::constant(&dims, 256, 20, &[1.0], &[0.0]);
        let sol = solve_system(&m, &controls, &grid, &paths, &ObservedBasis::default()).unwrap();
        let y0 = sol.backward.y0()[0];
        assert!((y0 + 1.5).abs() < 1e-9, "y(0) = {y0}");
        assert!((sol.x.scalar(17, 20) - 1.5).abs() < 1e-12);
    }
}
