//! Deterministic time-dependent coefficients.
//!
//! Model specifications carry scalar and matrix coefficients that may vary
//! in time. Three shapes cover everything in scope: constants, affine
//! functions of time, and piecewise-constant tables. Solvers evaluate them
//! at grid times; nothing here interpolates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar coefficient as a deterministic function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarCoeff {
    Constant(f64),
    Linear { intercept: f64, slope: f64 },
    /// `values[i]` applies on `[breaks[i], breaks[i+1])`; the last value
    /// extends to the right, the first to the left.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
}

impl ScalarCoeff {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ScalarCoeff::Constant(v) => *v,
            ScalarCoeff::Linear { intercept, slope } => intercept + slope * t,
            ScalarCoeff::Piecewise { breaks, values } => {
                let pos = breaks.partition_point(|b| *b <= t);
                if pos == 0 {
                    values[0]
                } else {
                    values[pos - 1]
                }
            }
        }
    }

    /// True when the coefficient is the constant zero.
    pub fn is_zero(&self) -> bool {
        match self {
            ScalarCoeff::Constant(v) => *v == 0.0,
            ScalarCoeff::Linear { intercept, slope } => *intercept == 0.0 && *slope == 0.0,
            ScalarCoeff::Piecewise { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let mut violations = Vec::new();
        self.collect_violations(name, &mut violations);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(violations))
        }
    }

    pub fn collect_violations(&self, name: &str, out: &mut Vec<String>) {
        match self {
            ScalarCoeff::Constant(v) => {
                if !v.is_finite() {
                    out.push(format!("{name}: constant value is not finite"));
                }
            }
            ScalarCoeff::Linear { intercept, slope } => {
                if !intercept.is_finite() || !slope.is_finite() {
                    out.push(format!("{name}: linear coefficients are not finite"));
                }
            }
            ScalarCoeff::Piecewise { breaks, values } => {
                if breaks.len() != values.len() {
                    out.push(format!(
                        "{name}: piecewise table has {} breaks but {} values",
                        breaks.len(),
                        values.len()
                    ));
                }
                if breaks.is_empty() {
                    out.push(format!("{name}: piecewise table is empty"));
                }
                if breaks.windows(2).any(|w| w[0] >= w[1]) {
                    out.push(format!("{name}: piecewise breaks must be strictly increasing"));
                }
                if breaks.iter().chain(values.iter()).any(|v| !v.is_finite()) {
                    out.push(format!("{name}: piecewise table contains non-finite entries"));
                }
            }
        }
    }
}

/// Matrix coefficient: a constant matrix, optionally modulated in time by
/// a scalar factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MatCoeff {
    pub base: DMatrix<f64>,
    pub scale: ScalarCoeff,
}

impl MatCoeff {
    pub fn constant(base: DMatrix<f64>) -> Self {
        MatCoeff {
            base,
            scale: ScalarCoeff::Constant(1.0),
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self::constant(DMatrix::zeros(nrows, ncols))
    }

    pub fn nrows(&self) -> usize {
        self.base.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.base.ncols()
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        &self.base * self.scale.eval(t)
    }

    /// True when the coefficient vanishes identically.
    pub fn is_zero(&self) -> bool {
        self.base.iter().all(|v| *v == 0.0) || self.scale.is_zero()
    }

    /// True when the time modulation is a fixed scalar, i.e. the
    /// coefficient does not vary in time.
    pub fn is_constant(&self) -> bool {
        matches!(self.scale, ScalarCoeff::Constant(_))
    }

    pub fn collect_violations(&self, name: &str, out: &mut Vec<String>) {
        if self.base.iter().any(|v| !v.is_finite()) {
            out.push(format!("{name}: matrix contains non-finite entries"));
        }
        self.scale.collect_violations(&format!("{name}.scale"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_lookup_uses_left_closed_intervals() {
        let c = ScalarCoeff::Piecewise {
            breaks: vec![0.0, 0.5, 1.0],
            values: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(c.eval(-0.1), 1.0);
        assert_eq!(c.eval(0.0), 1.0);
        assert_eq!(c.eval(0.499), 1.0);
        assert_eq!(c.eval(0.5), 2.0);
        assert_eq!(c.eval(0.999), 2.0);
        assert_eq!(c.eval(1.0), 3.0);
        assert_eq!(c.eval(7.0), 3.0);
    }

    #[test]
    fn matrix_coefficient_scales_in_time() {
        let m = MatCoeff {
            base: DMatrix::from_row_slice(1, 1, &[2.0]),
            scale: ScalarCoeff::Linear {
                intercept: 1.0,
                slope: 1.0,
            },
        };
        assert_eq!(m.eval(0.0)[(0, 0)], 2.0);
        assert_eq!(m.eval(0.5)[(0, 0)], 3.0);
        assert!(!m.is_zero());
        assert!(MatCoeff::zeros(2, 2).is_zero());
    }

    #[test]
    fn invalid_piecewise_tables_report_each_defect() {
        let c = ScalarCoeff::Piecewise {
            breaks: vec![0.0, 0.0],
            values: vec![1.0],
        };
        let mut v = Vec::new();
        c.collect_violations("r", &mut v);
        assert_eq!(v.len(), 2, "violations: {v:?}");
    }
}
