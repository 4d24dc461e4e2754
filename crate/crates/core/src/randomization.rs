//! Seeded treatment assignment.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::rng::{domain, hash_str, seed_fingerprint, stream};
use crate::stratification::StratumSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandError {
    #[error("stratum {stratum_id}: size {size} times p = {p} is not a positive integer")]
    NonIntegralAllocation { stratum_id: usize, size: usize, p: f64 },
    #[error("allocation probability {0} is outside (0, 1)")]
    InvalidProbability(f64),
    #[error("{n} units at p = {p} leave an empty arm")]
    EmptyArm { n: usize, p: f64 },
    #[error("{0} unit ids for a design over {1} units")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assignment {
    pub unit_id: String,
    pub treatment: u8,
    pub stratum_id: Option<usize>,
    pub seed_fingerprint: String,
}

fn check_probability(p: f64) -> Result<(), RandError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(RandError::InvalidProbability(p))
    }
}

fn integral_count(size: usize, p: f64) -> Option<usize> {
    let m = size as f64 * p;
    let r = m.round();
    ((m - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
}

/// Checks every stratum admits an integral treated count.
pub fn validate_allocation(strata: &StratumSet, p: f64) -> Result<(), RandError> {
    check_probability(p)?;
    for s in &strata.strata {
        if integral_count(s.size(), p).is_none() {
            return Err(RandError::NonIntegralAllocation { stratum_id: s.stratum_id, size: s.size(), p });
        }
    }
    Ok(())
}

/// Treatment per unit position. Each stratum draws from its own stream keyed
/// by `(seed, stratum_id)`; the leftover unit gets a coin flip from a
/// separate stream.
pub fn assign_treatments(strata: &StratumSet, n: usize, p: f64, seed: u64) -> Result<Vec<u8>, RandError> {
    validate_allocation(strata, p)?;
    let mut treatment = vec![0u8; n];
    for s in &strata.strata {
        let m = integral_count(s.size(), p).expect("validated");
        let mut rng = stream(seed, &[domain::STRATUM, s.stratum_id as u64]);
        for k in sample(&mut rng, s.size(), m) {
            treatment[s.members[k]] = 1;
        }
    }
    if let Some(u) = strata.leftover {
        let mut rng = stream(seed, &[domain::LEFTOVER]);
        treatment[u] = u8::from(rng.random_bool(p));
    }
    Ok(treatment)
}

pub fn assign_within_strata(
    strata: &StratumSet,
    unit_ids: &[String],
    p: f64,
    seed: u64,
) -> Result<Vec<Assignment>, RandError> {
    let n = unit_ids.len();
    if strata.unit_count() != n {
        return Err(RandError::LengthMismatch(n, strata.unit_count()));
    }
    let treatment = assign_treatments(strata, n, p, seed)?;
    let stratum_of = strata.stratum_of(n);
    let fp = seed_fingerprint(seed);
    Ok(unit_ids
        .iter()
        .zip(treatment)
        .zip(stratum_of)
        .map(|((id, t), s)| Assignment { unit_id: id.clone(), treatment: t, stratum_id: s, seed_fingerprint: fp.clone() })
        .collect())
}

/// Complete randomization: exactly `round(n p)` treated, chosen uniformly.
pub fn complete_randomization(n: usize, p: f64, seed: u64) -> Result<Vec<u8>, RandError> {
    check_probability(p)?;
    let m = (n as f64 * p).round() as usize;
    if (n as f64 * p).floor() < 1.0 || m >= n {
        return Err(RandError::EmptyArm { n, p });
    }
    let mut rng = stream(seed, &[domain::SIMPLE]);
    let mut treatment = vec![0u8; n];
    for i in sample(&mut rng, n, m) {
        treatment[i] = 1;
    }
    Ok(treatment)
}

pub fn simple_randomization(unit_ids: &[String], p: f64, seed: u64) -> Result<Vec<Assignment>, RandError> {
    let treatment = complete_randomization(unit_ids.len(), p, seed)?;
    let fp = seed_fingerprint(seed);
    Ok(unit_ids
        .iter()
        .zip(treatment)
        .map(|(id, t)| Assignment { unit_id: id.clone(), treatment: t, stratum_id: None, seed_fingerprint: fp.clone() })
        .collect())
}

/// Complete randomization inside each category cell. A cell of size `s`
/// treats `floor(s p)` units plus one more with probability equal to the
/// fractional part, so every unit is treated with probability `p`.
pub fn categorical_randomization(keys: &[String], p: f64, seed: u64) -> Result<Vec<u8>, RandError> {
    check_probability(p)?;
    let mut cells: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        cells.entry(k.as_str()).or_default().push(i);
    }
    let mut treatment = vec![0u8; keys.len()];
    for (key, members) in cells {
        let mut rng = stream(seed, &[domain::STRATUM, hash_str(key)]);
        let target = members.len() as f64 * p;
        let mut m = target.floor() as usize;
        if rng.random_bool(target - target.floor()) {
            m += 1;
        }
        for k in sample(&mut rng, members.len(), m) {
            treatment[members[k]] = 1;
        }
    }
    Ok(treatment)
}
