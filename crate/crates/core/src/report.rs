//! Machine-readable run results: a JSON report plus plot-ready CSV
//! summaries of trajectories.
//!
//! The report keeps a fixed field order with the wall-clock timing block
//! last, so two runs of the same configuration and seed produce
//! byte-identical files once that one block is dropped. Every number in
//! the `metrics` section carries either a standard error or an explicit
//! `exact` tag; there is no third kind.
//!
//! CSV summaries have one row per grid time — `n_steps + 1` core rows —
//! plus clearly labeled rows for the history segment (delayed processes)
//! and the extension segment (anticipated processes), with per-component
//! cross-path mean, standard deviation, and 5%/50%/95% quantiles.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::engine::TimeGrid;
use crate::error::Result;
use crate::trajectory::Trajectory;

/// One named numeric result: a Monte Carlo estimate with its standard
/// error, or a deterministic value tagged exact.
#[derive(Debug, Clone, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub exact: bool,
}

impl Metric {
    pub fn estimated(name: impl Into<String>, value: f64, se: f64) -> Self {
        Metric {
            name: name.into(),
            value,
            se: Some(se),
            exact: false,
        }
    }

    pub fn exact(name: impl Into<String>, value: f64) -> Self {
        Metric {
            name: name.into(),
            value,
            se: None,
            exact: true,
        }
    }
}

/// One pass/fail verdict against a configured tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct FlagRow {
    pub name: String,
    pub pass: bool,
}

impl FlagRow {
    pub fn new(name: impl Into<String>, pass: bool) -> Self {
        FlagRow {
            name: name.into(),
            pass,
        }
    }
}

/// Wall-clock timing of one phase, in milliseconds.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseTiming {
    pub name: String,
    pub ms: u128,
}

/// The timing block; isolated so determinism checks can drop it.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub total_ms: u128,
    pub phases: Vec<PhaseTiming>,
}

impl Timings {
    pub fn push(&mut self, name: impl Into<String>, ms: u128) {
        self.phases.push(PhaseTiming {
            name: name.into(),
            ms,
        });
    }
}

/// Complete result of one CLI run. Serialized field order is part of the
/// contract: `timings` stays last and is the only block that varies
/// between identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub artifact_version: String,
    pub subcommand: String,
    /// The effective configuration after command-line overrides.
    pub config: serde_json::Value,
    /// Headline numbers; each carries an SE or an exact tag.
    pub metrics: Vec<Metric>,
    /// Every pass/fail verdict of the run.
    pub flags: Vec<FlagRow>,
    pub all_pass: bool,
    /// Full solver and verification output, nested per operation.
    pub details: serde_json::Value,
    pub timings: Timings,
}

impl RunReport {
    pub fn new(subcommand: impl Into<String>, config: serde_json::Value) -> Self {
        RunReport {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.into(),
            config,
            metrics: Vec::new(),
            flags: Vec::new(),
            all_pass: true,
            details: serde_json::Value::Null,
            timings: Timings::default(),
        }
    }

    pub fn flag(&mut self, name: impl Into<String>, pass: bool) {
        self.all_pass &= pass;
        self.flags.push(FlagRow::new(name, pass));
    }

    /// Names of every failed flag, for error text.
    pub fn failed_flags(&self) -> Vec<&str> {
        self.flags
            .iter()
            .filter(|f| !f.pass)
            .map(|f| f.name.as_str())
            .collect()
    }

    /// Writes `report.json` under `dir`, creating the directory.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// Nearest-rank sample quantile on a pre-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    let rank = (q * m as f64).ceil() as usize;
    sorted[rank.clamp(1, m) - 1]
}

/// Segment label of a time index relative to the core grid `[0, n]`.
fn segment(j: isize, n: isize) -> &'static str {
    if j < 0 {
        "history"
    } else if j <= n {
        "core"
    } else {
        "extension"
    }
}

/// Writes a cross-path summary of one trajectory to `<dir>/<name>.csv`.
///
/// Columns: `t`, `segment`, then `{name}{c}_mean`, `_sd`, `_q05`,
/// `_q50`, `_q95` per component `c`. One row per time index on the
/// trajectory's full range; the core rows are exactly `n_steps + 1`.
pub fn write_trajectory_csv(
    dir: impl AsRef<Path>,
    name: &str,
    grid: &TimeGrid,
    traj: &Trajectory,
) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.csv"));
    let n = grid.n_steps() as isize;
    let m = traj.m_paths();
    let dim = traj.dim();

    let mut out = String::new();
    out.push_str("t,segment");
    for c in 0..dim {
        let _ = write!(
            out,
            ",{name}{c}_mean,{name}{c}_sd,{name}{c}_q05,{name}{c}_q50,{name}{c}_q95"
        );
    }
    out.push('\n');

    let mut column = vec![0.0; m];
    for j in traj.lo()..=traj.hi() {
        let _ = write!(out, "{},{}", grid.t(j), segment(j, n));
        for c in 0..dim {
            for (p, slot) in column.iter_mut().enumerate() {
                *slot = traj.component(p, j, c);
            }
            let mean = column.iter().sum::<f64>() / m as f64;
            let var = if m > 1 {
                column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0)
            } else {
                0.0
            };
            column.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in CSV summary"));
            let _ = write!(
                out,
                ",{},{},{},{},{}",
                mean,
                var.sqrt(),
                quantile_sorted(&column, 0.05),
                quantile_sorted(&column, 0.50),
                quantile_sorted(&column, 0.95),
            );
        }
        out.push('\n');
    }
    std::fs::write(&path, out)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("delaygame_report_{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn metrics_serialize_with_se_or_exact_tag_never_both() {
        let est = serde_json::to_value(Metric::estimated("j1", 1.5, 0.1)).unwrap();
        assert_eq!(est["se"], serde_json::json!(0.1));
        assert!(est.get("exact").is_none());
        let ex = serde_json::to_value(Metric::exact("psi0", 2.0)).unwrap();
        assert_eq!(ex["exact"], serde_json::json!(true));
        assert!(ex.get("se").is_none());
    }

    #[test]
    fn report_field_order_keeps_timings_last() {
        let mut rep = RunReport::new("solve-lq", serde_json::json!({"kind": "lq"}));
        rep.flag("converged", true);
        rep.timings.total_ms = 12;
        let text = serde_json::to_string(&rep).unwrap();
        let timings_at = text.find("\"timings\"").unwrap();
        for key in [
            "\"artifact_version\"",
            "\"subcommand\"",
            "\"config\"",
            "\"metrics\"",
            "\"flags\"",
            "\"all_pass\"",
            "\"details\"",
        ] {
            assert!(text.find(key).unwrap() < timings_at, "{key} after timings");
        }
    }

    #[test]
    fn failed_flags_flip_all_pass_and_are_listed() {
        let mut rep = RunReport::new("verify-nash", serde_json::Value::Null);
        rep.flag("a", true);
        rep.flag("b", false);
        rep.flag("c", false);
        assert!(!rep.all_pass);
        assert_eq!(rep.failed_flags(), vec!["b", "c"]);
    }

    #[test]
    fn csv_has_core_rows_equal_to_steps_plus_one_and_labeled_extension() {
        let grid = TimeGrid::new(1.0, 0.25, 8).unwrap();
        // Extended range [-2, 10]: history and extension rows included.
        let mut traj = Trajectory::zeros(3, 1, -2, 10);
        for p in 0..3 {
            for j in -2..=10 {
                traj.set_scalar(p, j, p as f64 + j as f64);
            }
        }
        let dir = tmp_dir("rows");
        let path = write_trajectory_csv(&dir, "x", &grid, &traj).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "t,segment,x0_mean,x0_sd,x0_q05,x0_q50,x0_q95");
        let core = rows.iter().filter(|r| r.contains(",core,")).count();
        let history = rows.iter().filter(|r| r.contains(",history,")).count();
        let extension = rows.iter().filter(|r| r.contains(",extension,")).count();
        assert_eq!(core, 9);
        assert_eq!(history, 2);
        assert_eq!(extension, 2);
        assert_eq!(rows.len(), 1 + 13);
    }

    #[test]
    fn csv_statistics_match_hand_values() {
        let grid = TimeGrid::new(1.0, 0.5, 2).unwrap();
        let mut traj = Trajectory::zeros(4, 1, 0, 2);
        for (p, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            for j in 0..=2 {
                traj.set_scalar(p, j, *v);
            }
        }
        let dir = tmp_dir("stats");
        let path = write_trajectory_csv(&dir, "w", &grid, &traj).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let first = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = first.split(',').collect();
        // mean 2.5, sd sqrt(5/3), q05 -> 1, q50 -> 2 (nearest rank), q95 -> 4.
        assert_eq!(fields[2], "2.5");
        let sd: f64 = fields[3].parse().unwrap();
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(fields[4], "1");
        assert_eq!(fields[5], "2");
        assert_eq!(fields[6], "4");
    }

    #[test]
    fn nearest_rank_quantiles_hit_order_statistics() {
        let sorted = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert_eq!(quantile_sorted(&sorted, 0.05), 10.0);
        assert_eq!(quantile_sorted(&sorted, 0.50), 30.0);
        assert_eq!(quantile_sorted(&sorted, 0.95), 50.0);
        assert_eq!(quantile_sorted(&sorted, 1.0), 50.0);
        assert_eq!(quantile_sorted(&sorted, 0.0), 10.0);
    }
}
