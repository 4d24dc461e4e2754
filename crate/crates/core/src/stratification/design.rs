//! Design entry point: picks a strata method and handles odd counts.

use serde::{Deserialize, Serialize};

use super::covariance::{estimate_covariance, DEFAULT_RIDGE_EPSILON};
use super::matching::{default_lambda, hybrid_cost_matrix, min_cost_pair_matching};
use super::{sorted_block_strata, sorted_order, sorted_pair_strata, StratError, StratumSet};
use crate::data::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum StrataMethod {
    SortedPairs,
    SortedBlocks {
        block_size: usize,
    },
    MahalanobisPairs {
        #[serde(default = "default_ridge")]
        ridge_epsilon: f64,
    },
    HybridPairs {
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default = "default_ridge")]
        ridge_epsilon: f64,
    },
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE_EPSILON
}

impl StrataMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            StrataMethod::SortedPairs => "sorted-pair",
            StrataMethod::SortedBlocks { .. } => "sorted-block",
            StrataMethod::MahalanobisPairs { .. } => "mahalanobis-pair",
            StrataMethod::HybridPairs { .. } => "hybrid-pair",
        }
    }

    pub fn needs_scores(&self) -> bool {
        match self {
            StrataMethod::SortedPairs | StrataMethod::SortedBlocks { .. } => true,
            StrataMethod::MahalanobisPairs { .. } => false,
            StrataMethod::HybridPairs { lambda, .. } => *lambda != Some(0.0),
        }
    }

    pub fn needs_features(&self) -> bool {
        match self {
            StrataMethod::SortedPairs | StrataMethod::SortedBlocks { .. } => false,
            StrataMethod::MahalanobisPairs { .. } => true,
            StrataMethod::HybridPairs { lambda, .. } => *lambda != Some(1.0),
        }
    }
}

/// Everything a design may look at. Outcomes are deliberately absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignInputs {
    pub scores: Option<Vec<f64>>,
    pub features: Option<FeatureMatrix>,
}

impl DesignInputs {
    pub fn len(&self) -> usize {
        self.scores
            .as_ref()
            .map(Vec::len)
            .or(self.features.as_ref().map(|f| f.n_rows))
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash of every input bit; equal fingerprints mean identical designs.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: u64| h = crate::rng::splitmix64(h ^ v);
        if let Some(g) = &self.scores {
            mix(g.len() as u64);
            g.iter().for_each(|v| mix(v.to_bits()));
        }
        if let Some(f) = &self.features {
            mix(f.n_rows as u64);
            f.names.iter().for_each(|n| mix(crate::rng::hash_str(n)));
            f.data.iter().for_each(|v| mix(v.to_bits()));
        }
        h
    }
}

/// Builds strata for `method`. Pair designs with an odd count set one unit
/// aside: the median-score unit when scores exist, otherwise the unit
/// closest to the covariate centroid.
pub fn form_strata(inputs: &DesignInputs, method: &StrataMethod) -> Result<StratumSet, StratError> {
    let n = inputs.len();
    if let (Some(g), Some(f)) = (&inputs.scores, &inputs.features) {
        if g.len() != f.n_rows {
            return Err(StratError::DimensionMismatch(g.len(), f.n_rows));
        }
    }
    let scores = inputs.scores.as_deref();
    if method.needs_scores() && scores.is_none() {
        return Err(StratError::MissingScores(method.tag().into()));
    }
    if method.needs_features() && inputs.features.is_none() {
        return Err(StratError::MissingFeatures(method.tag().into()));
    }
    match method {
        StrataMethod::SortedPairs => sorted_pair_strata(scores.expect("checked")),
        StrataMethod::SortedBlocks { block_size } => sorted_block_strata(scores.expect("checked"), *block_size),
        StrataMethod::MahalanobisPairs { ridge_epsilon } => matched_pairs(inputs, Some(0.0), *ridge_epsilon, n),
        StrataMethod::HybridPairs { lambda, ridge_epsilon } => {
            if let Some(l) = lambda {
                if !(0.0..=1.0).contains(l) {
                    return Err(StratError::InvalidLambda(*l));
                }
            }
            matched_pairs(inputs, *lambda, *ridge_epsilon, n)
        }
    }
    .map(|mut set| {
        set.method_tag = method.tag().to_string();
        set
    })
}

fn matched_pairs(
    inputs: &DesignInputs,
    lambda: Option<f64>,
    ridge_epsilon: f64,
    n: usize,
) -> Result<StratumSet, StratError> {
    if n < 2 {
        return Err(StratError::TooFewUnits { need: 2, got: n });
    }
    let scores = inputs.scores.as_deref();
    let uses_covariates = lambda != Some(1.0);
    let whitened = match (&inputs.features, uses_covariates) {
        (Some(f), true) => {
            let cov = estimate_covariance(f, ridge_epsilon)?;
            Some((cov.whiten(f), cov.dim()))
        }
        _ => None,
    };
    let lambda = match lambda {
        Some(l) => l,
        None => default_lambda(whitened.as_ref().map_or(0, |(_, k)| *k)),
    };

    let leftover = (n % 2 == 1).then(|| match (scores, &whitened) {
        (Some(g), _) => super::median_unit(g),
        (None, Some((z, k))) => nearest_centroid(z, *k),
        (None, None) => n - 1,
    });
    let active: Vec<usize> = (0..n).filter(|&i| Some(i) != leftover).collect();
    let sub_scores: Option<Vec<f64>> = scores.map(|g| active.iter().map(|&i| g[i]).collect());
    let sub_whitened: Option<(Vec<f64>, usize)> = whitened.as_ref().map(|(z, k)| {
        let rows = active.iter().flat_map(|&i| z[i * k..(i + 1) * k].iter().copied()).collect();
        (rows, *k)
    });
    let cost = hybrid_cost_matrix(
        sub_scores.as_deref(),
        sub_whitened.as_ref().map(|(z, k)| (z.as_slice(), *k)),
        lambda,
    );
    let matching = min_cost_pair_matching(&cost)?;

    let mut pairs: Vec<[usize; 2]> = matching.pairs.iter().map(|&(a, b)| [active[a], active[b]]).collect();
    if let Some(g) = scores {
        // within a pair, lower score first; pairs ascending by pair mean
        for p in &mut pairs {
            if g[p[1]] < g[p[0]] {
                p.swap(0, 1);
            }
        }
        let means: Vec<f64> = pairs.iter().map(|p| g[p[0]] + g[p[1]]).collect();
        let order = sorted_order(&means);
        pairs = order.into_iter().map(|i| pairs[i]).collect();
    }
    let mut set = StratumSet::from_groups(pairs.into_iter().map(|p| p.to_vec()).collect(), "");
    set.total_cost = Some(matching.total_cost);
    set.leftover = leftover;
    set.lambda = Some(lambda);
    Ok(set)
}

fn nearest_centroid(z: &[f64], k: usize) -> usize {
    let n = z.len() / k;
    let mut centroid = vec![0.0; k];
    for i in 0..n {
        for c in 0..k {
            centroid[c] += z[i * k + c] / n as f64;
        }
    }
    let dist = |i: usize| -> f64 { (0..k).map(|c| (z[i * k + c] - centroid[c]).powi(2)).sum() };
    (0..n).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap_or(0)
}
