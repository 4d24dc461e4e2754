use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::StratError;
use crate::data::FeatureMatrix;

pub const MAX_CONDITION: f64 = 1e12;
pub const DEFAULT_RIDGE_EPSILON: f64 = 1e-8;

/// Sample covariance of the non-constant columns and its (possibly ridged)
/// inverse.
#[derive(Debug, Clone)]
pub struct Covariance {
    /// Indices of the columns kept from the input matrix.
    pub columns: Vec<usize>,
    pub names: Vec<String>,
    pub dropped: Vec<String>,
    pub sigma: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    pub ridge_applied: bool,
    /// Upper-triangular `U` with `U^T U = sigma_inv`; `U x` whitens a row.
    whitener: DMatrix<f64>,
}

impl Covariance {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Rows mapped so that squared Euclidean distance equals squared
    /// Mahalanobis distance. Row-major, `n * dim()`.
    pub fn whiten(&self, fm: &FeatureMatrix) -> Vec<f64> {
        let k = self.dim();
        let mut out = Vec::with_capacity(fm.n_rows * k);
        let mut x = DVector::zeros(k);
        for i in 0..fm.n_rows {
            let row = fm.row(i);
            for (slot, &c) in self.columns.iter().enumerate() {
                x[slot] = row[c];
            }
            let z = &self.whitener * &x;
            out.extend(z.iter());
        }
        out
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|&c| row[c]).collect()
    }
}

/// `sqrt((xi - xj)' sigma_inv (xi - xj))`.
pub fn mahalanobis_distance(xi: &[f64], xj: &[f64], sigma_inv: &DMatrix<f64>) -> Result<f64, StratError> {
    Ok(squared_mahalanobis(xi, xj, sigma_inv)?.max(0.0).sqrt())
}

pub fn squared_mahalanobis(xi: &[f64], xj: &[f64], sigma_inv: &DMatrix<f64>) -> Result<f64, StratError> {
    if xi.len() != xj.len() {
        return Err(StratError::DimensionMismatch(xi.len(), xj.len()));
    }
    if sigma_inv.nrows() != xi.len() || sigma_inv.ncols() != xi.len() {
        return Err(StratError::DimensionMismatch(xi.len(), sigma_inv.nrows()));
    }
    let d = DVector::from_iterator(xi.len(), xi.iter().zip(xj).map(|(a, b)| a - b));
    Ok((d.transpose() * sigma_inv * &d)[(0, 0)])
}

/// Divisor `n - 1`. Constant columns are dropped with a warning. The inverse
/// is ridged by `ridge_epsilon * mean(diag)` when the condition number
/// exceeds 1e12 or the matrix is not positive definite.
pub fn estimate_covariance(fm: &FeatureMatrix, ridge_epsilon: f64) -> Result<Covariance, StratError> {
    let n = fm.n_rows;
    if n < 2 {
        return Err(StratError::TooFewUnits { need: 2, got: n });
    }
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..fm.n_cols() {
        let first = fm.row(0)[j];
        if (1..n).all(|i| fm.row(i)[j] == first) {
            log::warn!("covariate `{}` is constant in this sample and is dropped", fm.names[j]);
            dropped.push(fm.names[j].clone());
        } else {
            columns.push(j);
        }
    }
    if columns.is_empty() {
        return Err(StratError::DegenerateCovariate(
            dropped.first().cloned().unwrap_or_else(|| "<none>".into()),
        ));
    }
    let k = columns.len();
    let mut means = vec![0.0; k];
    for i in 0..n {
        let row = fm.row(i);
        for (m, &c) in means.iter_mut().zip(&columns) {
            *m += row[c];
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut sigma = DMatrix::<f64>::zeros(k, k);
    let mut dev = vec![0.0; k];
    for i in 0..n {
        let row = fm.row(i);
        for (a, &c) in columns.iter().enumerate() {
            dev[a] = row[c] - means[a];
        }
        for a in 0..k {
            for b in a..k {
                sigma[(a, b)] += dev[a] * dev[b];
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let v = sigma[(a, b)] / (n - 1) as f64;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }

    let eig = SymmetricEigen::new(sigma.clone());
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    let well_conditioned = min_eig > 0.0 && max_eig / min_eig <= MAX_CONDITION;
    let (inverse_of, ridge_applied) = if well_conditioned {
        (sigma.clone(), false)
    } else {
        let mean_diag = sigma.diagonal().mean();
        log::warn!(
            "covariance is ill-conditioned (eigenvalues {min_eig:e}..{max_eig:e}); adding ridge {ridge_epsilon:e} x mean diagonal"
        );
        (&sigma + DMatrix::identity(k, k) * (ridge_epsilon * mean_diag), true)
    };
    let chol = inverse_of.cholesky().ok_or(StratError::SingularCovariance)?;
    let sigma_inv = chol.inverse();
    let sigma_inv = (&sigma_inv + sigma_inv.transpose()) * 0.5;
    let whitener = sigma_inv
        .clone()
        .cholesky()
        .ok_or(StratError::SingularCovariance)?
        .l()
        .transpose();

    Ok(Covariance {
        names: columns.iter().map(|&c| fm.names[c].clone()).collect(),
        columns,
        dropped,
        sigma,
        sigma_inv,
        ridge_applied,
        whitener,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn fm(names: &[&str], rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(names.iter().map(|s| s.to_string()).collect(), rows)
    }

    #[test]
    fn identity_is_euclidean() {
        let eye = DMatrix::identity(2, 2);
        assert_eq!(mahalanobis_distance(&[3.0, 4.0], &[0.0, 0.0], &eye).unwrap(), 5.0);
        assert_eq!(mahalanobis_distance(&[1.5, -2.0], &[1.5, -2.0], &eye).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_scaling() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let inv = sigma.try_inverse().unwrap();
        assert_relative_eq!(mahalanobis_distance(&[2.0, 0.0], &[0.0, 0.0], &inv).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let eye = DMatrix::identity(2, 2);
        assert_eq!(mahalanobis_distance(&[1.0], &[1.0, 2.0], &eye), Err(StratError::DimensionMismatch(1, 2)));
        assert!(mahalanobis_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &eye).is_err());
    }

    #[test]
    fn standard_normal_sample_covariance_near_identity() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..100_000)
            .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let cov = estimate_covariance(&fm(&["a", "b"], &rows), DEFAULT_RIDGE_EPSILON).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((cov.sigma[(a, b)] - target).abs() < 0.02, "sigma[{a},{b}] = {}", cov.sigma[(a, b)]);
            }
        }
        assert!(!cov.ridge_applied);
    }

    #[test]
    fn constant_column_dropped() {
        let rows = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![4.0, 5.0]];
        let cov = estimate_covariance(&fm(&["a", "c"], &rows), DEFAULT_RIDGE_EPSILON).unwrap();
        assert_eq!(cov.names, vec!["a"]);
        assert_eq!(cov.dropped, vec!["c"]);
        let all_constant = vec![vec![5.0], vec![5.0]];
        assert_eq!(
            estimate_covariance(&fm(&["c"], &all_constant), DEFAULT_RIDGE_EPSILON).unwrap_err(),
            StratError::DegenerateCovariate("c".into())
        );
    }

    #[test]
    fn two_points_closed_form() {
        // values a, b: variance = 2 * ((b - a) / 2)^2 / (n - 1) with n = 2
        let cov = estimate_covariance(&fm(&["x"], &[vec![1.0], vec![4.0]]), DEFAULT_RIDGE_EPSILON).unwrap();
        assert_relative_eq!(cov.sigma[(0, 0)], 2.0 * 1.5f64.powi(2) / 1.0);
        assert_relative_eq!(cov.sigma_inv[(0, 0)], 1.0 / 4.5);
    }

    #[test]
    fn collinear_columns_get_ridge() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![f64::from(i), 2.0 * f64::from(i)]).collect();
        let cov = estimate_covariance(&fm(&["a", "b"], &rows), DEFAULT_RIDGE_EPSILON).unwrap();
        assert!(cov.ridge_applied);
        assert!(cov.sigma_inv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn whitening_matches_quadratic_form() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let c: f64 = StandardNormal.sample(&mut rng);
                vec![a, 0.5 * a + b, 3.0 * c - b]
            })
            .collect();
        let m = fm(&["a", "b", "c"], &rows);
        let cov = estimate_covariance(&m, DEFAULT_RIDGE_EPSILON).unwrap();
        let z = cov.whiten(&m);
        for (i, j) in [(0, 1), (3, 17), (49, 2)] {
            let direct = squared_mahalanobis(&rows[i], &rows[j], &cov.sigma_inv).unwrap();
            let via: f64 = (0..3).map(|c| (z[i * 3 + c] - z[j * 3 + c]).powi(2)).sum();
            assert_relative_eq!(direct, via, max_relative = 1e-10);
        }
    }

    proptest! {
        #[test]
        fn mahalanobis_is_a_metric(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 3),
            a in 0.5f64..3.0, b in -0.4f64..0.4, c in 1.0f64..3.0,
        ) {
            // SPD by diagonal dominance
            let sigma = DMatrix::from_row_slice(3, 3, &[a, b, 0.0, b, c, b, 0.0, b, 1.0]);
            let inv = sigma.try_inverse().unwrap();
            let d = |x: &[f64], y: &[f64]| mahalanobis_distance(x, y, &inv).unwrap();
            let (x, y, z) = (&pts[0], &pts[1], &pts[2]);
            prop_assert!((d(x, y) - d(y, x)).abs() < 1e-9);
            prop_assert!(d(x, z) <= d(x, y) + d(y, z) + 1e-9);
            prop_assert!(d(x, y) >= 0.0);
        }
    }
}
