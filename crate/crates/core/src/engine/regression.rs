//! Cross-sectional least-squares estimation of conditional expectations.
//!
//! Backward solvers replace every conditional expectation `E[xi | F_t]`
//! by a regression of the per-path samples of `xi` on a polynomial basis
//! in per-path observable features (typically the observed Brownian value
//! and selected state components at time `t`). The fitted values are the
//! per-path estimates.
//!
//! The design uses all monomials up to a total degree, an unpenalized
//! intercept, and feature standardization with a small ridge term on the
//! non-constant columns. Two exact properties of this construction are
//! load-bearing and are kept under test: the fitted values average to the
//! sample mean of the targets (a discrete tower property), and the fit is
//! linear in the targets. Degenerate columns (constant features, or `t = 0`
//! where nothing is random yet) drop out harmlessly, so the regression at
//! the initial time reduces to the plain sample mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Polynomial regression basis on observable features.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedBasis {
    /// Maximum total degree of the monomials.
    pub degree: u32,
    /// Ridge weight applied to the standardized non-constant columns.
    pub ridge: f64,
}

impl Default for ObservedBasis {
    fn default() -> Self {
        ObservedBasis {
            degree: 2,
            ridge: 1e-8,
        }
    }
}

/// All exponent vectors over `n_features` variables with total degree at
/// most `degree`, in graded lexicographic order starting with the constant.
pub fn monomial_exponents(n_features: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut current = vec![0u32; n_features];
        fill(&mut out, &mut current, 0, total);
    }
    return out;

    fn fill(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
        if pos + 1 == current.len() {
            current[pos] = remaining;
            out.push(current.clone());
            current[pos] = 0;
            return;
        }
        for e in (0..=remaining).rev() {
            current[pos] = e;
            fill(out, current, pos + 1, remaining - e);
            current[pos] = 0;
        }
    }
}

/// A factored regression design at one time slice, reusable across any
/// number of target vectors on the same features.
pub struct RegressionPlan {
    m: usize,
    design: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    time_index: isize,
}

impl ObservedBasis {
    /// Builds and factors the design for `m` paths of `n_features` features
    /// given row-major (`features[path * n_features + k]`). `time_index` is
    /// carried for error reporting only.
    pub fn plan(
        &self,
        features: &[f64],
        n_features: usize,
        m: usize,
        time_index: isize,
    ) -> Result<RegressionPlan> {
        assert_eq!(features.len(), m * n_features, "feature buffer shape");
        if m == 0 {
            return Err(Error::Regression {
                time_index,
                reason: "no paths".to_string(),
            });
        }
        for (pos, v) in features.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Regression {
                    time_index,
                    reason: format!(
                        "feature column {} is non-finite at path {}",
                        pos % n_features.max(1),
                        pos / n_features.max(1)
                    ),
                });
            }
        }

        let exps = monomial_exponents(n_features, self.degree);
        let n_cols = exps.len();
        let mut design = DMatrix::zeros(m, n_cols);
        for (c, e) in exps.iter().enumerate() {
            for p in 0..m {
                let mut v = 1.0;
                for (k, &pow) in e.iter().enumerate() {
                    for _ in 0..pow {
                        v *= features[p * n_features + k];
                    }
                }
                design[(p, c)] = v;
            }
        }

        // Standardize the non-constant columns so the ridge penalty is
        // scale-free and the intercept stays orthogonal to the rest; a
        // column with no cross-sectional variation is zeroed out, which the
        // ridge term then keeps harmless.
        for c in 1..n_cols {
            let mut mean = 0.0;
            for p in 0..m {
                mean += design[(p, c)];
            }
            mean /= m as f64;
            let mut var = 0.0;
            for p in 0..m {
                let d = design[(p, c)] - mean;
                var += d * d;
            }
            let sd = (var / m as f64).sqrt();
            let scale = if sd > 1e-12 * mean.abs().max(1.0) {
                1.0 / sd
            } else {
                0.0
            };
            for p in 0..m {
                let d = design[(p, c)] - mean;
                design[(p, c)] = d * scale;
            }
        }

        let mut gram = design.tr_mul(&design);
        for c in 1..n_cols {
            gram[(c, c)] += self.ridge.max(1e-300) * m as f64;
        }
        // The intercept column needs no penalty, but an all-degenerate
        // design must still factor.
        gram[(0, 0)] += 1e-300;
        let chol = Cholesky::new(gram).ok_or_else(|| Error::Regression {
            time_index,
            reason: "normal matrix is not positive definite".to_string(),
        })?;

        Ok(RegressionPlan {
            m,
            design,
            chol,
            time_index,
        })
    }
}

impl RegressionPlan {
    pub fn m_paths(&self) -> usize {
        self.m
    }

    pub fn n_cols(&self) -> usize {
        self.design.ncols()
    }

    /// The standardized design matrix (column 0 is the intercept).
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Fitted values of the regression of `targets` on the design; these
    /// are the per-path conditional expectation estimates.
    pub fn fit(&self, targets: &[f64]) -> Result<Vec<f64>> {
        let coeffs = self.coefficients(targets)?;
        let fitted = &self.design * &coeffs;
        Ok(fitted.as_slice().to_vec())
    }

    /// Regression coefficients on the standardized design.
    pub fn coefficients(&self, targets: &[f64]) -> Result<DVector<f64>> {
        assert_eq!(targets.len(), self.m, "target length");
        if let Some(p) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::Regression {
                time_index: self.time_index,
                reason: format!("target is non-finite at path {p}"),
            });
        }
        let y = DVector::from_column_slice(targets);
        let rhs = self.design.tr_mul(&y);
        Ok(self.chol.solve(&rhs))
    }
}

/// One-shot conditional expectation estimate: build the design for the
/// given features and return the fitted values for the targets.
pub fn estimate_conditional(
    basis: &ObservedBasis,
    features: &[f64],
    n_features: usize,
    targets: &[f64],
    time_index: isize,
) -> Result<Vec<f64>> {
    let m = targets.len();
    basis.plan(features, n_features, m, time_index)?.fit(targets)
}

/// Observable feature columns assembled from trajectory blocks.
///
/// Each block contributes all of its components; `gather` produces the
/// row-major feature buffer for one time slice.
pub struct FeatureSet<'a> {
    blocks: Vec<&'a Trajectory>,
}

impl<'a> FeatureSet<'a> {
    pub fn new(blocks: Vec<&'a Trajectory>) -> Self {
        assert!(!blocks.is_empty(), "at least one feature block is required");
        let m = blocks[0].m_paths();
        assert!(
            blocks.iter().all(|b| b.m_paths() == m),
            "feature blocks must share the path count"
        );
        FeatureSet { blocks }
    }

    pub fn n_features(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn m_paths(&self) -> usize {
        self.blocks[0].m_paths()
    }

    /// Writes the feature rows at time index `idx` into `out`.
    pub fn gather(&self, idx: isize, out: &mut Vec<f64>) {
        let m = self.m_paths();
        out.clear();
        out.reserve(m * self.n_features());
        for p in 0..m {
            for b in &self.blocks {
                out.extend_from_slice(b.at(p, idx));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linspace_features(m: usize) -> Vec<f64> {
        (0..m).map(|p| -1.0 + 2.0 * p as f64 / (m - 1) as f64).collect()
    }

    #[test]
    fn exponents_are_graded_and_complete() {
        let e = monomial_exponents(2, 2);
        assert_eq!(e.len(), 6);
        assert_eq!(e[0], vec![0, 0]);
        assert_eq!(
            e,
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
    }

    #[test]
    fn polynomial_in_span_is_recovered() {
        let m = 512;
        let f = linspace_features(m);
        let targets: Vec<f64> = f.iter().map(|x| 2.0 + 3.0 * x - 0.5 * x * x).collect();
        let basis = ObservedBasis::default();
        let fitted = estimate_conditional(&basis, &f, 1, &targets, 0).unwrap();
        for (a, b) in fitted.iter().zip(&targets) {
            assert!((a - b).abs() < 1e-6, "fit {a} vs target {b}");
        }
    }

    #[test]
    fn fitted_mean_equals_target_mean() {
        let m = 300;
        let f = linspace_features(m);
        let targets: Vec<f64> = f.iter().map(|x| (5.0 * x).sin() + 0.3).collect();
        let fitted =
            estimate_conditional(&ObservedBasis::default(), &f, 1, &targets, 3).unwrap();
        let tm: f64 = targets.iter().sum::<f64>() / m as f64;
        let fm: f64 = fitted.iter().sum::<f64>() / m as f64;
        assert!((tm - fm).abs() < 1e-10, "tower property: {tm} vs {fm}");
    }

    #[test]
    fn fit_is_linear_in_the_targets() {
        let m = 200;
        let f = linspace_features(m);
        let y1: Vec<f64> = f.iter().map(|x| x.exp()).collect();
        let y2: Vec<f64> = f.iter().map(|x| x * x * x).collect();
        let combo: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| 2.5 * a - 4.0 * b).collect();
        let basis = ObservedBasis::default();
        let plan = basis.plan(&f, 1, m, 0).unwrap();
        let f1 = plan.fit(&y1).unwrap();
        let f2 = plan.fit(&y2).unwrap();
        let fc = plan.fit(&combo).unwrap();
        for p in 0..m {
            let lin = 2.5 * f1[p] - 4.0 * f2[p];
            assert!((fc[p] - lin).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_features_reduce_to_the_sample_mean() {
        let m = 64;
        let f = vec![3.25; m];
        let targets: Vec<f64> = (0..m).map(|p| p as f64).collect();
        let fitted =
            estimate_conditional(&ObservedBasis::default(), &f, 1, &targets, 0).unwrap();
        let mean = targets.iter().sum::<f64>() / m as f64;
        for v in fitted {
            assert!((v - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_target_is_reported_with_position() {
        let m = 16;
        let f = linspace_features(m);
        let mut targets = vec![1.0; m];
        targets[5] = f64::NAN;
        let err =
            estimate_conditional(&ObservedBasis::default(), &f, 1, &targets, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("path 5"), "message: {msg}");
        assert!(msg.contains("7"), "message: {msg}");
    }

    #[test]
    fn degenerate_extra_feature_changes_nothing_material() {
        let m = 256;
        let f1 = linspace_features(m);
        let mut f2 = Vec::with_capacity(2 * m);
        for v in &f1 {
            f2.push(*v);
            f2.push(42.0);
        }
        let targets: Vec<f64> = f1.iter().map(|x| 1.0 + x * x).collect();
        let basis = ObservedBasis::default();
        let a = estimate_conditional(&basis, &f1, 1, &targets, 0).unwrap();
        let b = estimate_conditional(&basis, &f2, 2, &targets, 0).unwrap();
        for p in 0..m {
            assert!((a[p] - b[p]).abs() < 1e-8);
        }
    }
}
