//! Least squares with collinear-column dropping and HC2 standard errors.

use nalgebra::{DMatrix, DVector};

use super::{EstError, EstimateReport};
use crate::data::FeatureMatrix;

/// Relative residual norm below which a column counts as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct OlsFit {
    /// Indices of design columns kept after collinearity checks.
    pub kept: Vec<usize>,
    /// Coefficients aligned with `kept`.
    pub coefficients: Vec<f64>,
    /// HC2 covariance of the coefficients, when requested.
    pub hc2: Option<DMatrix<f64>>,
}

impl OlsFit {
    pub fn coefficient(&self, column: usize) -> Option<f64> {
        self.kept.iter().position(|&c| c == column).map(|i| self.coefficients[i])
    }

    pub fn std_error(&self, column: usize) -> Option<f64> {
        let i = self.kept.iter().position(|&c| c == column)?;
        self.hc2.as_ref().map(|v| v[(i, i)].max(0.0).sqrt())
    }

    /// Fitted value for a full-width design row.
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.kept.iter().zip(&self.coefficients).map(|(&c, b)| row[c] * b).sum()
    }
}

/// Columns surviving a modified Gram-Schmidt pass, in input order.
fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let proj = q.dot(&r);
            r.axpy(-proj, q, 1.0);
        }
        let rn = r.norm();
        if norm > 0.0 && rn > COLLINEAR_TOL * norm.max(1.0) {
            basis.push(r / rn);
            kept.push(j);
        }
    }
    kept
}

/// Fits `y ~ x`. Columns that are linear combinations of earlier ones are
/// dropped with a warning.
pub fn fit_ols(x: &DMatrix<f64>, y: &[f64], names: &[String], robust: bool) -> Result<OlsFit, EstError> {
    let n = x.nrows();
    if y.len() != n {
        return Err(EstError::LengthMismatch(y.len(), n));
    }
    let kept = independent_columns(x);
    for j in (0..x.ncols()).filter(|j| !kept.contains(j)) {
        log::warn!("design column `{}` is collinear and is dropped", names.get(j).map_or("?", String::as_str));
    }
    if kept.is_empty() {
        return Err(EstError::RankDeficient("no independent columns".into()));
    }
    let xk = x.select_columns(&kept);
    let yv = DVector::from_column_slice(y);
    let xtx = xk.transpose() * &xk;
    let xtx_inv = xtx
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| EstError::RankDeficient("normal equations are singular".into()))?;
    let beta = &xtx_inv * (xk.transpose() * &yv);
    let hc2 = robust.then(|| {
        let p = kept.len();
        let resid = &yv - &xk * &beta;
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let xi = xk.row(i).transpose();
            let h = (xi.transpose() * &xtx_inv * &xi)[(0, 0)];
            let one_minus_h = 1.0 - h;
            if one_minus_h <= 1e-12 {
                continue;
            }
            let w = resid[i] * resid[i] / one_minus_h;
            meat += &xi * xi.transpose() * w;
        }
        &xtx_inv * meat * &xtx_inv
    });
    Ok(OlsFit { kept, coefficients: beta.iter().copied().collect(), hc2 })
}

/// Regression of the outcome on intercept, treatment and covariates; the
/// treatment coefficient with its HC2 standard error.
pub fn ols_adjusted_estimate(
    outcomes: &[f64],
    treatments: &[u8],
    covariates: Option<&FeatureMatrix>,
) -> Result<EstimateReport, EstError> {
    let n = outcomes.len();
    if treatments.len() != n {
        return Err(EstError::LengthMismatch(treatments.len(), n));
    }
    let n1 = treatments.iter().filter(|&&t| t == 1).count();
    if n1 == 0 || n1 == n {
        return Err(EstError::EmptyArm);
    }
    let k = covariates.map_or(0, FeatureMatrix::n_cols);
    if let Some(c) = covariates {
        if c.n_rows != n {
            return Err(EstError::LengthMismatch(c.n_rows, n));
        }
    }
    let mut names = vec!["(intercept)".to_string(), "treatment".to_string()];
    if let Some(c) = covariates {
        names.extend(c.names.iter().cloned());
    }
    let x = DMatrix::from_fn(n, 2 + k, |i, j| match j {
        0 => 1.0,
        1 => f64::from(treatments[i]),
        _ => covariates.expect("k > 0").row(i)[j - 2],
    });
    let fit = fit_ols(&x, outcomes, &names, true)?;
    let tau_hat = fit
        .coefficient(1)
        .ok_or_else(|| EstError::RankDeficient("treatment column is collinear with covariates".into()))?;
    Ok(EstimateReport {
        tau_hat,
        se_hat: fit.std_error(1).unwrap_or(0.0),
        estimator_tag: "ols-hc2".into(),
        n_used: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::difference_in_means;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn simulate(n: usize, seed: u64, f: impl Fn(f64, u8, f64) -> f64) -> (Vec<f64>, Vec<u8>, FeatureMatrix) {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut y = Vec::new();
        let mut d = Vec::new();
        let mut rows = Vec::new();
        for i in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let t = u8::from(i % 2 == 0);
            y.push(f(x, t, e));
            d.push(t);
            rows.push(vec![x]);
        }
        (y, d, FeatureMatrix::from_rows(vec!["x".into()], &rows))
    }

    #[test]
    fn no_covariates_matches_difference_in_means() {
        let (y, d, _) = simulate(101, 1, |x, t, e| 2.0 * x + f64::from(t) + e);
        let ols = ols_adjusted_estimate(&y, &d, None).unwrap();
        let dim = difference_in_means(&y, &d).unwrap();
        assert_relative_eq!(ols.tau_hat, dim.tau_hat, max_relative = 1e-10);
        // HC2 with a lone dummy reproduces the Neyman variance
        assert_relative_eq!(ols.se_hat, dim.se_hat, max_relative = 1e-10);
    }

    #[test]
    fn irrelevant_covariate_agrees_with_difference_in_means() {
        let (y, d, fm) = simulate(5000, 2, |_, t, e| 0.5 * f64::from(t) + e);
        let ols = ols_adjusted_estimate(&y, &d, Some(&fm)).unwrap();
        let dim = difference_in_means(&y, &d).unwrap();
        assert!((ols.tau_hat - dim.tau_hat).abs() < 2.0 * dim.se_hat);
    }

    #[test]
    fn deterministic_covariate_drives_se_down() {
        let se_at = |n| {
            let (y, d, fm) = simulate(n, 3, |x, t, e| 3.0 * x + f64::from(t) + 1e-3 * e);
            ols_adjusted_estimate(&y, &d, Some(&fm)).unwrap().se_hat
        };
        let small = se_at(100);
        let large = se_at(10_000);
        assert!(large < small && large < 1e-3, "{small} -> {large}");
    }

    #[test]
    fn duplicated_column_is_dropped() {
        let (y, d, fm) = simulate(300, 4, |x, t, e| x + f64::from(t) + e);
        let rows: Vec<Vec<f64>> = (0..fm.n_rows).map(|i| vec![fm.row(i)[0], fm.row(i)[0]]).collect();
        let doubled = FeatureMatrix::from_rows(vec!["x".into(), "x_copy".into()], &rows);
        let a = ols_adjusted_estimate(&y, &d, Some(&fm)).unwrap();
        let b = ols_adjusted_estimate(&y, &d, Some(&doubled)).unwrap();
        assert_relative_eq!(a.tau_hat, b.tau_hat, max_relative = 1e-9);
    }

    #[test]
    fn treatment_absorbed_by_covariate_is_rank_deficient() {
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let d = vec![0, 1, 0, 1];
        let fm = FeatureMatrix::from_rows(vec!["dup".into()], &[vec![0.0], vec![1.0], vec![0.0], vec![1.0]]);
        // treatment precedes covariates, so the covariate is the one dropped
        assert!(ols_adjusted_estimate(&y, &d, Some(&fm)).is_ok());
        assert_eq!(ols_adjusted_estimate(&y, &[1, 1, 1, 1], None), Err(EstError::EmptyArm));
    }
}
