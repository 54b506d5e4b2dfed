//! Run configuration: a single JSON document describing the model, the
//! grid, the simulation budget, solver options, and verification
//! tolerances.
//!
//! Loading is two-phase. [`load_config`] first parses the document with
//! position-carrying parse errors, then [`ModelConfig::validate`] walks
//! every block and collects *all* violations — grid misalignment, shape
//! mismatches, sign conditions — rather than stopping at the first, so
//! one round trip fixes a broken file.
//!
//! Matrices are nested row-major arrays; dimensions are read off the
//! nesting and cross-checked against the declared [`Dims`].
//! Time-dependent coefficients use the named analytic forms of
//! [`ScalarCoeff`] (`constant`, `linear`, `piecewise`).

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeff::{MatCoeff, ScalarCoeff};
use crate::engine::{ObservedBasis, PathBundle, TimeGrid};
use crate::error::{Error, Result};
use crate::game::{DirectionProfile, NashOptions};
use crate::lq::{FixedPointOptions, LqModelSpec, LqWeights};
use crate::model::Dims;
use crate::pension::{DiscountMode, PensionSpec};

/// Which model family the config describes and which solvers apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Linear dynamics run through the generic engine only; no
    /// equilibrium solver is attached.
    General,
    /// Linear-quadratic game with the filtered fixed-point solver.
    Lq,
    /// Pension-fund example with the closed-form equilibrium.
    Pension,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::General => "general",
            ModelKind::Lq => "lq",
            ModelKind::Pension => "pension",
        }
    }
}

/// Time grid block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub t_horizon: f64,
    pub delay: f64,
    pub n_steps: usize,
}

fn default_m_paths() -> usize {
    4096
}
fn default_master_seed() -> u64 {
    7
}
fn default_basis_degree() -> u32 {
    ObservedBasis::default().degree
}
fn default_ridge() -> f64 {
    ObservedBasis::default().ridge
}

/// Simulation block: path budget, seeds, and regression basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_m_paths")]
    pub m_paths: usize,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    /// Separate seed for the unobserved motion; defaults to a fixed
    /// offset of the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wbar_seed: Option<u64>,
    #[serde(default = "default_basis_degree")]
    pub basis_degree: u32,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            m_paths: default_m_paths(),
            master_seed: default_master_seed(),
            wbar_seed: None,
            basis_degree: default_basis_degree(),
            ridge: default_ridge(),
        }
    }
}

/// Fixed-point solver block; defaults match [`FixedPointOptions`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = FixedPointOptions::default();
        SolverConfig {
            damping: o.damping,
            tol: o.tol,
            max_iter: o.max_iter,
        }
    }
}

fn default_se_multiplier() -> f64 {
    3.0
}
fn default_h4_tolerance() -> f64 {
    1e-2
}

/// Verification block: perturbation sizes, direction battery, and the
/// single SE multiplier used by every pass/fail flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationConfig {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_directions")]
    pub directions: Vec<DirectionProfile>,
    #[serde(default = "default_se_multiplier")]
    pub se_multiplier: f64,
    /// Relative discrete-L2 tolerance of the aggregation cross-check.
    #[serde(default = "default_h4_tolerance")]
    pub h4_tolerance: f64,
}

fn default_epsilons() -> Vec<f64> {
    NashOptions::default().epsilons
}
fn default_directions() -> Vec<DirectionProfile> {
    NashOptions::default().profiles
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            epsilons: default_epsilons(),
            directions: default_directions(),
            se_multiplier: default_se_multiplier(),
            h4_tolerance: default_h4_tolerance(),
        }
    }
}

/// Matrix coefficient: nested row-major array plus an optional scalar
/// time modulation (defaults to the constant 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatCoeffConfig {
    pub base: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScalarCoeff>,
}

impl MatCoeffConfig {
    fn rows(&self) -> usize {
        self.base.len()
    }

    fn cols(&self) -> usize {
        self.base.first().map_or(0, Vec::len)
    }

    /// Rejects ragged nesting; shape checks against the declared
    /// dimensions live in [`LqModelSpec::validate`].
    fn to_coeff(&self, name: &str, violations: &mut Vec<String>) -> MatCoeff {
        let cols = self.cols();
        if self.base.iter().any(|row| row.len() != cols) {
            violations.push(format!("{name}: ragged matrix rows"));
            return MatCoeff::zeros(self.rows(), cols);
        }
        let flat: Vec<f64> = self.base.iter().flatten().copied().collect();
        MatCoeff {
            base: DMatrix::from_row_slice(self.rows(), cols, &flat),
            scale: self.scale.clone().unwrap_or(ScalarCoeff::Constant(1.0)),
        }
    }
}

fn to_matrix(raw: &[Vec<f64>], name: &str, violations: &mut Vec<String>) -> DMatrix<f64> {
    let rows = raw.len();
    let cols = raw.first().map_or(0, Vec::len);
    if raw.iter().any(|row| row.len() != cols) {
        violations.push(format!("{name}: ragged matrix rows"));
        return DMatrix::zeros(rows, cols);
    }
    let flat: Vec<f64> = raw.iter().flatten().copied().collect();
    DMatrix::from_row_slice(rows, cols, &flat)
}

/// One player's quadratic weights as plain constant matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqWeightsConfig {
    pub o: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub qbar: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub m_term: Vec<Vec<f64>>,
    pub n_init: Vec<Vec<f64>>,
}

impl LqWeightsConfig {
    fn to_weights(&self, player: usize, violations: &mut Vec<String>) -> LqWeights {
        let name = |field: &str| format!("weights[{player}].{field}");
        LqWeights {
            o: to_matrix(&self.o, &name("o"), violations),
            p: to_matrix(&self.p, &name("p"), violations),
            q: to_matrix(&self.q, &name("q"), violations),
            qbar: to_matrix(&self.qbar, &name("qbar"), violations),
            r: to_matrix(&self.r, &name("r"), violations),
            m_term: to_matrix(&self.m_term, &name("m_term"), violations),
            n_init: to_matrix(&self.n_init, &name("n_init"), violations),
        }
    }
}

fn default_r_cond_cap() -> f64 {
    1e8
}

/// Linear(-quadratic) coefficient block, mirroring [`LqModelSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqConfig {
    pub dims: Dims,
    pub a: MatCoeffConfig,
    pub a_delay: MatCoeffConfig,
    pub c: MatCoeffConfig,
    pub c_delay: MatCoeffConfig,
    pub b: [MatCoeffConfig; 2],
    pub d: [MatCoeffConfig; 2],
    pub e: MatCoeffConfig,
    pub f: MatCoeffConfig,
    pub f_delay: MatCoeffConfig,
    pub g: MatCoeffConfig,
    pub g_bar: MatCoeffConfig,
    pub h: [MatCoeffConfig; 2],
    pub m_t: Vec<Vec<f64>>,
    pub weights: [LqWeightsConfig; 2],
    pub xi: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(default = "default_r_cond_cap")]
    pub r_cond_cap: f64,
}

impl LqConfig {
    /// Builds the typed spec, folding structural violations (ragged
    /// arrays) and the spec's own shape/sign violations into one list.
    pub fn to_spec(&self) -> Result<LqModelSpec> {
        let mut v = Vec::new();
        let spec = LqModelSpec {
            dims: self.dims,
            a: self.a.to_coeff("a", &mut v),
            a_delay: self.a_delay.to_coeff("a_delay", &mut v),
            c: self.c.to_coeff("c", &mut v),
            c_delay: self.c_delay.to_coeff("c_delay", &mut v),
            b: [
                self.b[0].to_coeff("b[0]", &mut v),
                self.b[1].to_coeff("b[1]", &mut v),
            ],
            d: [
                self.d[0].to_coeff("d[0]", &mut v),
                self.d[1].to_coeff("d[1]", &mut v),
            ],
            e: self.e.to_coeff("e", &mut v),
            f: self.f.to_coeff("f", &mut v),
            f_delay: self.f_delay.to_coeff("f_delay", &mut v),
            g: self.g.to_coeff("g", &mut v),
            g_bar: self.g_bar.to_coeff("g_bar", &mut v),
            h: [
                self.h[0].to_coeff("h[0]", &mut v),
                self.h[1].to_coeff("h[1]", &mut v),
            ],
            m_t: to_matrix(&self.m_t, "m_t", &mut v),
            weights: [
                self.weights[0].to_weights(0, &mut v),
                self.weights[1].to_weights(1, &mut v),
            ],
            xi: self.xi.clone(),
            phi: self.phi.clone(),
            r_cond_cap: self.r_cond_cap,
        };
        if let Err(Error::Invalid(mut more)) = spec.validate() {
            v.append(&mut more);
        }
        if v.is_empty() { Ok(spec) } else { Err(Error::Invalid(v)) }
    }
}

/// Pension block; every field defaults to the baseline calibration, so
/// the minimal pension config is just `{"kind": "pension", ...grid...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PensionConfig {
    pub r: ScalarCoeff,
    pub mu: ScalarCoeff,
    pub sigma: ScalarCoeff,
    pub sigma_bar: ScalarCoeff,
    pub g: ScalarCoeff,
    pub pi: ScalarCoeff,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub l: [f64; 2],
    pub x0: f64,
    pub q_floor: f64,
    pub discount_mode: DiscountMode,
}

impl Default for PensionConfig {
    fn default() -> Self {
        let b = PensionSpec::baseline();
        PensionConfig {
            r: b.r,
            mu: b.mu,
            sigma: b.sigma,
            sigma_bar: b.sigma_bar,
            g: b.g,
            pi: b.pi,
            alpha: b.alpha,
            beta: b.beta,
            gamma: b.gamma,
            l: b.l,
            x0: b.x0,
            q_floor: b.q_floor,
            discount_mode: DiscountMode::default(),
        }
    }
}

impl PensionConfig {
    pub fn to_spec(&self) -> PensionSpec {
        PensionSpec {
            r: self.r.clone(),
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            sigma_bar: self.sigma_bar.clone(),
            g: self.g.clone(),
            pi: self.pi.clone(),
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            l: self.l,
            x0: self.x0,
            q_floor: self.q_floor,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub grid: GridConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verification: VerificationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq: Option<LqConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pension: Option<PensionConfig>,
}

impl ModelConfig {
    /// Collects every violation across all blocks. `Ok` means the grid
    /// builds, the declared kind has its coefficient block, and that
    /// block passes its own validation.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();

        let grid = match TimeGrid::new(self.grid.t_horizon, self.grid.delay, self.grid.n_steps) {
            Ok(g) => Some(g),
            Err(e) => {
                v.push(format!("grid: {e}"));
                None
            }
        };

        if self.sim.m_paths == 0 {
            v.push("sim.m_paths: must be at least 1".to_string());
        }
        if self.sim.basis_degree == 0 || self.sim.basis_degree > 6 {
            v.push(format!(
                "sim.basis_degree: {} outside 1..=6",
                self.sim.basis_degree
            ));
        }
        if !(self.sim.ridge >= 0.0 && self.sim.ridge.is_finite()) {
            v.push(format!("sim.ridge: {} not a finite nonnegative value", self.sim.ridge));
        }

        if !(0.0 < self.solver.damping && self.solver.damping <= 1.0) {
            v.push(format!(
                "solver.damping: {} outside (0, 1]",
                self.solver.damping
            ));
        }
        if !(self.solver.tol > 0.0 && self.solver.tol.is_finite()) {
            v.push(format!("solver.tol: {} not a finite positive value", self.solver.tol));
        }
        if self.solver.max_iter == 0 {
            v.push("solver.max_iter: must be at least 1".to_string());
        }

        if self.verification.epsilons.iter().any(|e| !e.is_finite() || *e < 0.0) {
            v.push("verification.epsilons: entries must be finite and nonnegative".to_string());
        }
        if self.verification.directions.is_empty() {
            v.push("verification.directions: must name at least one direction".to_string());
        }
        if !(self.verification.se_multiplier > 0.0) {
            v.push(format!(
                "verification.se_multiplier: {} must be positive",
                self.verification.se_multiplier
            ));
        }
        if !(self.verification.h4_tolerance > 0.0) {
            v.push(format!(
                "verification.h4_tolerance: {} must be positive",
                self.verification.h4_tolerance
            ));
        }

        match self.kind {
            ModelKind::Lq | ModelKind::General => {
                match &self.lq {
                    None => v.push(format!(
                        "kind {} requires the `lq` coefficient block",
                        self.kind.as_str()
                    )),
                    Some(lq) => {
                        if let Err(Error::Invalid(mut more)) = lq.to_spec() {
                            v.append(&mut more);
                        }
                    }
                }
            }
            ModelKind::Pension => {
                // The block is optional: every field has a baseline default.
                if let Some(g) = &grid {
                    let spec = self.pension.clone().unwrap_or_default().to_spec();
                    if let Err(Error::Invalid(mut more)) = spec.validate(g) {
                        v.append(&mut more);
                    }
                }
            }
        }

        if v.is_empty() { Ok(()) } else { Err(Error::Invalid(v)) }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t_horizon, self.grid.delay, self.grid.n_steps)
    }

    /// Samples the driving noise; the unobserved seed defaults to a
    /// fixed offset of the master seed so reseeding experiments can move
    /// it independently.
    pub fn sample_paths(&self, grid: &TimeGrid) -> PathBundle {
        let wbar = self
            .sim
            .wbar_seed
            .unwrap_or(self.sim.master_seed.wrapping_add(1));
        PathBundle::sample_with_seeds(grid, self.sim.m_paths, self.sim.master_seed, wbar)
    }

    pub fn basis(&self) -> ObservedBasis {
        ObservedBasis {
            degree: self.sim.basis_degree,
            ridge: self.sim.ridge,
        }
    }

    pub fn fixed_point_options(&self) -> FixedPointOptions {
        FixedPointOptions {
            damping: self.solver.damping,
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
        }
    }

    pub fn nash_options(&self) -> NashOptions {
        NashOptions {
            epsilons: self.verification.epsilons.clone(),
            profiles: self.verification.directions.clone(),
            se_mult: self.verification.se_multiplier,
        }
    }

    /// The typed LQ spec; errors when the block is missing or invalid.
    pub fn lq_spec(&self) -> Result<LqModelSpec> {
        match &self.lq {
            Some(lq) => lq.to_spec(),
            None => Err(Error::Precondition(format!(
                "kind {} has no `lq` coefficient block",
                self.kind.as_str()
            ))),
        }
    }

    /// The typed pension spec; an absent block means the baseline.
    pub fn pension_spec(&self) -> PensionSpec {
        self.pension.clone().unwrap_or_default().to_spec()
    }

    /// Discount-exponent convention of the pension consumption formula.
    pub fn discount_mode(&self) -> DiscountMode {
        self.pension
            .as_ref()
            .map_or(DiscountMode::default(), |p| p.discount_mode)
    }
}

/// Reads and validates a configuration file. Parse errors carry line and
/// column; semantic violations are collected exhaustively.
pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_lq_block() -> serde_json::Value {
        let m = |v: f64| serde_json::json!({ "base": [[v]] });
        let w = |o: f64, r: f64| {
            serde_json::json!({
                "o": [[o]], "p": [[0.0]], "q": [[0.0]], "qbar": [[0.0]],
                "r": [[r]], "m_term": [[0.0]], "n_init": [[0.0]]
            })
        };
        serde_json::json!({
            "dims": { "n_x": 1, "n_y": 1, "n_u1": 1, "n_u2": 1 },
            "a": m(0.25), "a_delay": m(0.15), "c": m(0.2), "c_delay": m(-0.1),
            "b": [m(0.8), m(0.4)], "d": [m(0.0), m(0.0)],
            "e": m(0.25), "f": m(-0.3), "f_delay": m(0.1),
            "g": m(0.15), "g_bar": m(0.0), "h": [m(0.0), m(0.0)],
            "m_t": [[0.6]],
            "weights": [w(-0.4, -1.0), w(-0.2, -0.8)],
            "xi": [1.0], "phi": [0.3]
        })
    }

    fn lq_document() -> serde_json::Value {
        serde_json::json!({
            "kind": "lq",
            "grid": { "t_horizon": 1.0, "delay": 0.25, "n_steps": 16 },
            "lq": scalar_lq_block()
        })
    }

    #[test]
    fn minimal_pension_document_round_trips() {
        // An absent pension block and an empty one both mean the baseline.
        for doc in [
            serde_json::json!({
                "kind": "pension",
                "grid": { "t_horizon": 1.0, "delay": 0.25, "n_steps": 32 }
            }),
            serde_json::json!({
                "kind": "pension",
                "grid": { "t_horizon": 1.0, "delay": 0.25, "n_steps": 32 },
                "pension": {}
            }),
        ] {
            let config: ModelConfig = serde_json::from_value(doc).unwrap();
            config.validate().unwrap();
            let spec = config.pension_spec();
            let base = PensionSpec::baseline();
            assert_eq!(spec.alpha, base.alpha);
            assert_eq!(spec.gamma, base.gamma);
            assert_eq!(spec.l, base.l);
        }
    }

    #[test]
    fn lq_document_round_trips_and_solves_to_a_spec() {
        let config: ModelConfig = serde_json::from_value(lq_document()).unwrap();
        config.validate().unwrap();
        let spec = config.lq_spec().unwrap();
        assert_eq!(spec.dims.n_x, 1);
        assert_eq!(spec.m_t[(0, 0)], 0.6);
        assert_eq!(spec.weights[1].r[(0, 0)], -0.8);
    }

    #[test]
    fn positive_control_weight_is_rejected_by_name() {
        let mut doc = lq_document();
        doc["lq"]["weights"][0]["r"] = serde_json::json!([[1.0]]);
        let config: ModelConfig = serde_json::from_value(doc).unwrap();
        let err = config.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("negative definite"), "{msg}");
        assert!(msg.contains("weights[0].r"), "{msg}");
    }

    #[test]
    fn misaligned_delay_is_rejected() {
        let mut doc = lq_document();
        doc["grid"] = serde_json::json!({ "t_horizon": 1.0, "delay": 0.3, "n_steps": 8 });
        let config: ModelConfig = serde_json::from_value(doc).unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
    }

    #[test]
    fn every_violation_is_listed_not_just_the_first() {
        let mut doc = lq_document();
        doc["grid"] = serde_json::json!({ "t_horizon": 1.0, "delay": 0.3, "n_steps": 8 });
        doc["lq"]["weights"][0]["r"] = serde_json::json!([[1.0]]);
        doc["solver"] = serde_json::json!({ "damping": 1.5, "tol": 1e-6, "max_iter": 20 });
        let config: ModelConfig = serde_json::from_value(doc).unwrap();
        let err = config.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid"), "{msg}");
        assert!(msg.contains("weights[0].r"), "{msg}");
        assert!(msg.contains("solver.damping"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let dir = std::env::temp_dir().join("delaygame_config_parse_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("broken.json");
        std::fs::write(&path, "{ \"kind\": \"lq\",\n  broken }").unwrap();
        let err = load_config(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn ragged_matrices_are_reported() {
        let mut doc = lq_document();
        doc["lq"]["a"] = serde_json::json!({ "base": [[1.0, 2.0], [3.0]] });
        let config: ModelConfig = serde_json::from_value(doc).unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("ragged"), "{err}");
    }

    #[test]
    fn seeds_flow_into_the_path_bundle() {
        let doc = serde_json::json!({
            "kind": "pension",
            "grid": { "t_horizon": 1.0, "delay": 0.25, "n_steps": 8 },
            "sim": { "m_paths": 16, "master_seed": 99, "wbar_seed": 1234 },
            "pension": {}
        });
        let config: ModelConfig = serde_json::from_value(doc).unwrap();
        let grid = config.grid().unwrap();
        let paths = config.sample_paths(&grid);
        assert_eq!(paths.m_paths(), 16);
        assert_eq!(paths.master_seed(), 99);
        assert_eq!(paths.wbar_seed(), 1234);
    }
}
