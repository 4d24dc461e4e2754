//! Counterfactual imputation with one linear model per arm.

use nalgebra::DMatrix;

use super::{HarnessError, ImputedSample, Provenance};
use crate::data::FeatureMatrix;
use crate::estimation::{fit_ols, EstError};

struct ArmModel {
    fit: Option<crate::estimation::OlsFit>,
    mean: f64,
}

impl ArmModel {
    fn predict(&self, row: &[f64]) -> f64 {
        match &self.fit {
            Some(f) => f.predict(row),
            None => self.mean,
        }
    }
}

fn design_row(features: Option<&FeatureMatrix>, i: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    if let Some(f) = features {
        row.extend_from_slice(f.row(i));
    }
    row
}

/// Fits the arm's regression; `None` means only the intercept survived.
fn fit_arm(members: &[usize], outcomes: &[f64], features: Option<&FeatureMatrix>) -> Result<ArmModel, HarnessError> {
    let y: Vec<f64> = members.iter().map(|&i| outcomes[i]).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let k = features.map_or(0, FeatureMatrix::n_cols);
    if k == 0 {
        return Ok(ArmModel { fit: None, mean });
    }
    let f = features.expect("k > 0");
    let x = DMatrix::from_fn(members.len(), k + 1, |r, c| if c == 0 { 1.0 } else { f.row(members[r])[c - 1] });
    let mut names = vec!["(intercept)".to_string()];
    names.extend(f.names.iter().cloned());
    match fit_ols(&x, &y, &names, false) {
        Ok(fit) if fit.kept.len() > 1 => Ok(ArmModel { fit: Some(fit), mean }),
        Ok(_) | Err(EstError::RankDeficient(_)) => Ok(ArmModel { fit: None, mean }),
        Err(e) => Err(e.into()),
    }
}

/// Fills each unit's missing potential outcome with
/// `Y_obs + (m1(x) - m0(x))` for controls and `Y_obs - (m1(x) - m0(x))` for
/// treated units. Arms whose covariates are all collinear or constant fall
/// back to arm means, with a warning.
pub fn impute_counterfactuals(
    outcomes: &[f64],
    treatments: &[u8],
    covariates: Option<&FeatureMatrix>,
    unit_ids: Vec<String>,
) -> Result<ImputedSample, HarnessError> {
    let n = outcomes.len();
    if treatments.len() != n || unit_ids.len() != n || covariates.is_some_and(|c| c.n_rows != n) {
        return Err(HarnessError::InvalidSample("outcome, treatment, covariate and id lengths differ".into()));
    }
    let treated: Vec<usize> = (0..n).filter(|&i| treatments[i] == 1).collect();
    let control: Vec<usize> = (0..n).filter(|&i| treatments[i] == 0).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(EstError::EmptyArm.into());
    }
    let m1 = fit_arm(&treated, outcomes, covariates)?;
    let m0 = fit_arm(&control, outcomes, covariates)?;
    let fallback_used = covariates.is_some_and(|c| c.n_cols() > 0) && (m1.fit.is_none() || m0.fit.is_none());
    let (m1, m0) = if fallback_used {
        log::warn!("covariates carry no usable variation in at least one arm; imputing with arm means");
        (ArmModel { fit: None, mean: m1.mean }, ArmModel { fit: None, mean: m0.mean })
    } else {
        (m1, m0)
    };
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        let row = design_row(covariates, i);
        let effect = m1.predict(&row) - m0.predict(&row);
        if treatments[i] == 1 {
            y1.push(outcomes[i]);
            y0.push(outcomes[i] - effect);
            provenance.push(Provenance::ObservedY1);
        } else {
            y0.push(outcomes[i]);
            y1.push(outcomes[i] + effect);
            provenance.push(Provenance::ObservedY0);
        }
    }
    Ok(ImputedSample { unit_ids, y0, y1, provenance, covariates: covariates.cloned(), fallback_used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn exact_linear_effect_is_recovered() {
        let x: Vec<f64> = (0..40).map(|i| f64::from(i) * 0.37 - 3.0).collect();
        let d: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
        let y: Vec<f64> = x.iter().zip(&d).map(|(x, &t)| x + f64::from(t)).collect();
        let fm = FeatureMatrix::from_rows(vec!["x".into()], &x.iter().map(|v| vec![*v]).collect::<Vec<_>>());
        let s = impute_counterfactuals(&y, &d, Some(&fm), ids(40)).unwrap();
        for i in 0..40 {
            assert!((s.y1[i] - s.y0[i] - 1.0).abs() < 1e-9);
        }
        assert!(!s.fallback_used);
        assert_eq!(s.provenance[0], Provenance::ObservedY1);
        assert_eq!(s.provenance[1], Provenance::ObservedY0);
    }

    #[test]
    fn null_effect_imputes_near_zero_gap() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(12);
        let n = 4000;
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                2.0 * x + e
            })
            .collect();
        let fm = FeatureMatrix::from_rows(vec!["x".into()], &x.iter().map(|v| vec![*v]).collect::<Vec<_>>());
        let s = impute_counterfactuals(&y, &d, Some(&fm), ids(n)).unwrap();
        let gaps: Vec<f64> = (0..n).map(|i| s.y1[i] - s.y0[i]).collect();
        let mean = gaps.iter().sum::<f64>() / n as f64;
        // Neyman SE of the difference in arm means
        let dim = crate::estimation::difference_in_means(&y, &d).unwrap();
        assert!(mean.abs() < 2.0 * dim.se_hat, "mean gap {mean}, se {}", dim.se_hat);
    }

    #[test]
    fn constant_covariate_falls_back_to_arm_means() {
        let y = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0];
        let d = [0, 0, 0, 1, 1, 1];
        let fm = FeatureMatrix::from_rows(vec!["c".into()], &vec![vec![5.0]; 6]);
        let s = impute_counterfactuals(&y, &d, Some(&fm), ids(6)).unwrap();
        assert!(s.fallback_used);
        assert_eq!(s.y1[0], 1.0 + 9.0);
        assert_eq!(s.y0[3], 10.0 - 9.0);
    }

    #[test]
    fn empty_arm_is_an_error() {
        assert!(matches!(
            impute_counterfactuals(&[1.0, 2.0], &[1, 1], None, ids(2)),
            Err(HarnessError::Estimation(EstError::EmptyArm))
        ));
    }
}
