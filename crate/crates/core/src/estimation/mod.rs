//! Treatment-effect point and variance estimators.

pub mod ols;

use serde::Serialize;
use thiserror::Error;

pub use ols::{fit_ols, ols_adjusted_estimate, OlsFit};

use crate::stratification::StratumSet;

/// Fewest pairs the matched-pair variance estimator accepts.
pub const MIN_PAIRS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstError {
    #[error("one treatment arm is empty")]
    EmptyArm,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("design is not matched pairs: {0}")]
    NotPairedDesign(String),
    #[error("matched-pair variance needs at least {MIN_PAIRS} pairs, got {0}")]
    TooFewPairs(usize),
    #[error("variance inputs must be nonnegative and finite")]
    InvalidVariance,
    #[error("total outcome variance is zero")]
    DegenerateDenominator,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub tau_hat: f64,
    pub se_hat: f64,
    pub estimator_tag: String,
    pub n_used: usize,
}

fn mean_and_var(values: impl Iterator<Item = f64>, divisor_offset: usize) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    let var = if n > divisor_offset { ss / (n - divisor_offset) as f64 } else { 0.0 };
    (mean, var, n)
}

/// Treated mean minus control mean with the Neyman standard error
/// `sqrt(s1^2/n1 + s0^2/n0)`.
pub fn difference_in_means(outcomes: &[f64], treatments: &[u8]) -> Result<EstimateReport, EstError> {
    if outcomes.len() != treatments.len() {
        return Err(EstError::LengthMismatch(outcomes.len(), treatments.len()));
    }
    let arm = |d: u8| outcomes.iter().zip(treatments).filter(move |(_, &t)| t == d).map(|(y, _)| *y);
    if arm(1).next().is_none() || arm(0).next().is_none() {
        return Err(EstError::EmptyArm);
    }
    let (m1, v1, n1) = mean_and_var(arm(1), 1);
    let (m0, v0, n0) = mean_and_var(arm(0), 1);
    Ok(EstimateReport {
        tau_hat: m1 - m0,
        se_hat: (v1 / n1 as f64 + v0 / n0 as f64).sqrt(),
        estimator_tag: "difference-in-means".into(),
        n_used: n1 + n0,
    })
}

/// Outcomes of one pair as `(treated, control)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutcome {
    pub treated: f64,
    pub control: f64,
}

impl PairOutcome {
    /// Builds from two `(outcome, treatment)` members listed in any order.
    pub fn from_members(a: (f64, u8), b: (f64, u8)) -> Result<Self, EstError> {
        match (a.1, b.1) {
            (1, 0) => Ok(PairOutcome { treated: a.0, control: b.0 }),
            (0, 1) => Ok(PairOutcome { treated: b.0, control: a.0 }),
            _ => Err(EstError::NotPairedDesign("pair without exactly one treated unit".into())),
        }
    }

    fn sum(&self) -> f64 {
        self.treated + self.control
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedVariance {
    pub tau_hat: f64,
    /// Estimated asymptotic variance per pair.
    pub varsigma_sq: f64,
    pub rho_hat: f64,
    pub se: f64,
    pub n_pairs: usize,
}

/// Adjusted matched-pair variance for pairs listed in score order:
/// `s1^2 + s0^2 - rho/2 + (mu1 + mu0)^2 / 2`, with arm variances over the
/// `K` pairs (divisor `K`) and `rho` the mean cross-product of sums of
/// adjacent pairs, `(2/K) sum_j (Y_{2j-1} sum)(Y_{2j} sum)`. With odd `K`
/// the last pair sits out of `rho` only. The standard error of the
/// difference in means is `sqrt(varsigma^2 / K)`.
pub fn matched_pair_variance(pairs: &[PairOutcome]) -> Result<PairedVariance, EstError> {
    let k = pairs.len();
    if k < MIN_PAIRS {
        return Err(EstError::TooFewPairs(k));
    }
    let (mu1, s1, _) = mean_and_var(pairs.iter().map(|p| p.treated), 0);
    let (mu0, s0, _) = mean_and_var(pairs.iter().map(|p| p.control), 0);
    let cross: f64 = pairs.chunks_exact(2).map(|b| b[0].sum() * b[1].sum()).sum();
    let rho_hat = 2.0 * cross / k as f64;
    let varsigma_sq = s1 + s0 - 0.5 * rho_hat + 0.5 * (mu1 + mu0).powi(2);
    Ok(PairedVariance {
        tau_hat: mu1 - mu0,
        varsigma_sq,
        rho_hat,
        se: (varsigma_sq.max(0.0) / k as f64).sqrt(),
        n_pairs: k,
    })
}

/// Pair outcomes in stratum order; the leftover unit is skipped.
pub fn pair_outcomes(strata: &StratumSet, outcomes: &[f64], treatments: &[u8]) -> Result<Vec<PairOutcome>, EstError> {
    if !strata.is_paired() {
        return Err(EstError::NotPairedDesign(format!("`{}` has strata that are not pairs", strata.method_tag)));
    }
    strata
        .strata
        .iter()
        .map(|s| {
            let (a, b) = (s.members[0], s.members[1]);
            PairOutcome::from_members((outcomes[a], treatments[a]), (outcomes[b], treatments[b]))
        })
        .collect()
}

/// Difference in means over paired units with the matched-pair SE.
pub fn paired_estimate(strata: &StratumSet, outcomes: &[f64], treatments: &[u8]) -> Result<EstimateReport, EstError> {
    let pv = matched_pair_variance(&pair_outcomes(strata, outcomes, treatments)?)?;
    Ok(EstimateReport {
        tau_hat: pv.tau_hat,
        se_hat: pv.se,
        estimator_tag: "paired-difference".into(),
        n_used: 2 * pv.n_pairs,
    })
}

/// `1 - Var(E[Y(1)+Y(0)|h]) / (2 (Var Y(1) + Var Y(0)))`.
pub fn theoretical_variance_ratio(var_y1: f64, var_y0: f64, var_conditional_sum: f64) -> Result<f64, EstError> {
    let ok = |v: f64| v.is_finite() && v >= 0.0;
    if !(ok(var_y1) && ok(var_y0) && ok(var_conditional_sum)) {
        return Err(EstError::InvalidVariance);
    }
    let denom = 2.0 * (var_y1 + var_y0);
    if denom <= 0.0 {
        return Err(EstError::DegenerateDenominator);
    }
    Ok(1.0 - var_conditional_sum / denom)
}
