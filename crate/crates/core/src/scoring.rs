//! Prognostic scores from predicted potential outcomes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::PredictionPair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("allocation probability {0} is outside (0, 1)")]
    InvalidProbability(f64),
    #[error("length mismatch: {0} scores vs {1} reference values")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 units, got {0}")]
    TooFewUnits(usize),
    #[error("constant input, correlation undefined")]
    DegenerateVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUnit {
    pub unit_id: String,
    pub y0_hat: f64,
    pub y1_hat: f64,
    pub g_hat: f64,
}

/// Sum of the two predicted potential outcomes.
pub fn prognostic_score(pair: &PredictionPair) -> f64 {
    pair.y1_hat + pair.y0_hat
}

/// `y1/p + y0/(1-p)`, for allocations other than one half.
pub fn weighted_prognostic_score(pair: &PredictionPair, p: f64) -> Result<f64, ScoreError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ScoreError::InvalidProbability(p));
    }
    Ok(pair.y1_hat / p + pair.y0_hat / (1.0 - p))
}

/// Uses the unweighted sum at `p = 0.5` and the weighted variant otherwise.
pub fn score_units(pairs: &[PredictionPair], p: f64) -> Result<Vec<ScoredUnit>, ScoreError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ScoreError::InvalidProbability(p));
    }
    pairs
        .iter()
        .map(|pair| {
            let g_hat = if p == 0.5 { prognostic_score(pair) } else { weighted_prognostic_score(pair, p)? };
            Ok(ScoredUnit { unit_id: pair.unit_id.clone(), y0_hat: pair.y0_hat, y1_hat: pair.y1_hat, g_hat })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreQuality {
    pub pearson: f64,
    pub spearman: f64,
    /// R² of the reference regressed on the score.
    pub r_squared: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, ScoreError> {
    if a.len() != b.len() {
        return Err(ScoreError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(ScoreError::DegenerateVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks, ties share the mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

pub fn score_quality(scores: &[ScoredUnit], reference: &[f64]) -> Result<ScoreQuality, ScoreError> {
    if scores.len() != reference.len() {
        return Err(ScoreError::LengthMismatch(scores.len(), reference.len()));
    }
    if scores.len() < 3 {
        return Err(ScoreError::TooFewUnits(scores.len()));
    }
    let g: Vec<f64> = scores.iter().map(|s| s.g_hat).collect();
    let r = pearson(&g, reference)?;
    let spearman = pearson(&ranks(&g), &ranks(reference))?;
    Ok(ScoreQuality { pearson: r, spearman, r_squared: r * r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn pair(y0: f64, y1: f64) -> PredictionPair {
        PredictionPair { unit_id: "u".into(), y0_hat: y0, y1_hat: y1, backend_tag: "t".into(), raw_response: None }
    }

    fn scored(g: &[f64]) -> Vec<ScoredUnit> {
        g.iter()
            .enumerate()
            .map(|(i, &g_hat)| ScoredUnit { unit_id: i.to_string(), y0_hat: 0.0, y1_hat: g_hat, g_hat })
            .collect()
    }

    #[test]
    fn sum_score() {
        assert_eq!(prognostic_score(&pair(2.0, 3.0)), 5.0);
        assert_eq!(prognostic_score(&pair(0.0, 0.0)), 0.0);
        assert_eq!(prognostic_score(&pair(-1.5, 1.5)), 0.0);
    }

    #[test]
    fn weighted_score() {
        assert_eq!(weighted_prognostic_score(&pair(2.0, 3.0), 0.5), Ok(10.0));
        let w = weighted_prognostic_score(&pair(2.0, 3.0), 0.25).unwrap();
        assert!((w - (12.0 + 8.0 / 3.0)).abs() < 1e-12);
        assert_eq!(weighted_prognostic_score(&pair(2.0, 3.0), 0.0), Err(ScoreError::InvalidProbability(0.0)));
        assert!(weighted_prognostic_score(&pair(2.0, 3.0), 1.0).is_err());
        assert!(weighted_prognostic_score(&pair(2.0, 3.0), f64::NAN).is_err());
    }

    #[test]
    fn score_units_switches_on_allocation() {
        let pairs = [pair(2.0, 3.0)];
        assert_eq!(score_units(&pairs, 0.5).unwrap()[0].g_hat, 5.0);
        assert_eq!(score_units(&pairs, 0.25).unwrap()[0].g_hat, weighted_prognostic_score(&pairs[0], 0.25).unwrap());
    }

    #[test]
    fn perfect_and_inverse_correlation() {
        let g = [1.0, 4.0, 2.0, 8.0, 5.0];
        let q = score_quality(&scored(&g), &g).unwrap();
        assert!((q.pearson - 1.0).abs() < 1e-12);
        assert!((q.spearman - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let q = score_quality(&scored(&g), &neg).unwrap();
        assert!((q.pearson + 1.0).abs() < 1e-12);
        assert!((q.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quality_errors() {
        assert_eq!(score_quality(&scored(&[1.0, 2.0, 3.0]), &[1.0, 2.0]), Err(ScoreError::LengthMismatch(3, 2)));
        assert_eq!(score_quality(&scored(&[1.0, 2.0]), &[1.0, 2.0]), Err(ScoreError::TooFewUnits(2)));
        assert_eq!(score_quality(&scored(&[1.0, 1.0, 1.0]), &[1.0, 2.0, 3.0]), Err(ScoreError::DegenerateVariance));
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2024);
        let n = 10_000;
        let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q = score_quality(&scored(&a), &b).unwrap();
        assert!(q.pearson.abs() < 0.05, "rho = {}", q.pearson);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn half_allocation_doubles_sum(y0 in -1e6f64..1e6, y1 in -1e6f64..1e6) {
            let p = pair(y0, y1);
            prop_assert_eq!(weighted_prognostic_score(&p, 0.5).unwrap(), 2.0 * prognostic_score(&p));
        }
    }
}
