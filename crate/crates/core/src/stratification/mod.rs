//! Strata formation: sorted blocks on the prognostic score, Mahalanobis
//! matched pairs and hybrid-cost matched pairs.

pub mod covariance;
pub mod design;
pub mod matching;

use serde::Serialize;
use thiserror::Error;

pub use covariance::{estimate_covariance, mahalanobis_distance, Covariance};
pub use design::{form_strata, DesignInputs, StrataMethod};
pub use matching::{
    brute_force_matching, default_lambda, hybrid_pair_cost, min_cost_pair_matching, CostMatrix, HybridCostParams,
    Matching,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StratError {
    #[error("block size {k} exceeds unit count {n}")]
    BlockTooLarge { k: usize, n: usize },
    #[error("block size must be at least 2, got {0}")]
    InvalidBlockSize(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("perfect matching needs an even unit count, got {0}")]
    OddCount(usize),
    #[error("cost ({0}, {1}) is not a finite nonnegative number")]
    NonFiniteCost(usize, usize),
    #[error("need at least {need} units, got {got}")]
    TooFewUnits { need: usize, got: usize },
    #[error("every covariate is constant; nothing left for the Mahalanobis term (first: `{0}`)")]
    DegenerateCovariate(String),
    #[error("covariance matrix is singular even after ridge regularization")]
    SingularCovariance,
    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("covariate subset is empty but lambda < 1")]
    EmptyCovariateSubset,
    #[error("method `{0}` needs prognostic scores")]
    MissingScores(String),
    #[error("method `{0}` needs covariates")]
    MissingFeatures(String),
    #[error("exact matching is limited to {max} units, got {got}")]
    BruteForceTooLarge { max: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratum {
    pub stratum_id: usize,
    /// Positions into the unit list the strata were formed from.
    pub members: Vec<usize>,
}

impl Stratum {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumSet {
    pub strata: Vec<Stratum>,
    pub method_tag: String,
    /// Matching objective, present only for cost-based methods.
    pub total_cost: Option<f64>,
    /// Unit set aside when a pair design receives an odd count.
    pub leftover: Option<usize>,
    /// Score weight used by the hybrid cost.
    pub lambda: Option<f64>,
}

impl StratumSet {
    pub fn from_groups(groups: Vec<Vec<usize>>, method_tag: &str) -> Self {
        StratumSet {
            strata: groups
                .into_iter()
                .enumerate()
                .map(|(stratum_id, members)| Stratum { stratum_id, members })
                .collect(),
            method_tag: method_tag.to_string(),
            total_cost: None,
            leftover: None,
            lambda: None,
        }
    }

    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn is_paired(&self) -> bool {
        self.strata.iter().all(|s| s.size() == 2)
    }

    pub fn unit_count(&self) -> usize {
        self.strata.iter().map(Stratum::size).sum::<usize>() + usize::from(self.leftover.is_some())
    }

    /// Stratum id per unit position; `None` for the leftover.
    pub fn stratum_of(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for s in &self.strata {
            for &m in &s.members {
                out[m] = Some(s.stratum_id);
            }
        }
        out
    }

    /// Checks the partition covers `0..n` exactly once with strata of size >= 2.
    pub fn validate_partition(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        let members = self.strata.iter().flat_map(|s| s.members.iter()).chain(self.leftover.iter());
        for &m in members {
            if m >= n || seen[m] {
                return false;
            }
            seen[m] = true;
        }
        let ids_consecutive = self.strata.iter().enumerate().all(|(i, s)| s.stratum_id == i);
        seen.into_iter().all(|s| s) && ids_consecutive && self.strata.iter().all(|s| s.size() >= 2)
    }

    pub fn pair_set(&self) -> std::collections::BTreeSet<(usize, usize)> {
        self.strata
            .iter()
            .filter(|s| s.size() == 2)
            .map(|s| (s.members[0].min(s.members[1]), s.members[0].max(s.members[1])))
            .collect()
    }
}

/// Positions sorted ascending by score; ties keep input order.
pub fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Consecutive groups of `k` along the score order. A remainder joins the
/// final stratum.
pub fn sorted_block_strata(scores: &[f64], k: usize) -> Result<StratumSet, StratError> {
    if k < 2 {
        return Err(StratError::InvalidBlockSize(k));
    }
    let n = scores.len();
    if k > n {
        return Err(StratError::BlockTooLarge { k, n });
    }
    let order = sorted_order(scores);
    let mut groups: Vec<Vec<usize>> = order.chunks(k).map(<[usize]>::to_vec).collect();
    if !n.is_multiple_of(k) {
        let rest = groups.pop().expect("remainder chunk");
        groups.last_mut().expect("at least one full block").extend(rest);
    }
    let tag = if k == 2 { "sorted-pair" } else { "sorted-block" };
    Ok(StratumSet::from_groups(groups, tag))
}

/// Position of the median-score unit for an odd count (stable on ties).
pub fn median_unit(scores: &[f64]) -> usize {
    let order = sorted_order(scores);
    order[(order.len() - 1) / 2]
}

/// Matched pairs along the score order. With an odd count the median-score
/// unit becomes the leftover.
pub fn sorted_pair_strata(scores: &[f64]) -> Result<StratumSet, StratError> {
    let n = scores.len();
    if n < 2 {
        return Err(StratError::TooFewUnits { need: 2, got: n });
    }
    let mut order = sorted_order(scores);
    let leftover = (n % 2 == 1).then(|| order.remove((n - 1) / 2));
    let groups = order.chunks(2).map(<[usize]>::to_vec).collect();
    let mut set = StratumSet::from_groups(groups, "sorted-pair");
    set.leftover = leftover;
    Ok(set)
}
