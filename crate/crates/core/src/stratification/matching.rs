//! Minimum-cost perfect pair matching.
//!
//! The production matcher is a greedy nearest-available construction
//! followed by pair-swap (2-opt) local search: for any two pairs `(a, b)`
//! and `(c, d)` the alternatives `(a, c)(b, d)` and `(a, d)(b, c)` are tried
//! and the cheapest is kept, until a full sweep finds no strict improvement.
//! `brute_force_matching` enumerates every perfect matching and is meant for
//! small instances and tests.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::covariance::squared_mahalanobis;
use super::StratError;

pub const BRUTE_FORCE_MAX: usize = 12;
const STARTS: usize = 8;
const MULTI_START_MAX_N: usize = 128;

/// Dense symmetric cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (j, slot) in row.iter_mut().enumerate() {
                if i != j {
                    *slot = if i < j { f(i, j) } else { f(j, i) };
                }
            }
        });
        CostMatrix { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        CostMatrix { n, data: rows.iter().flat_map(|r| r.iter().copied()).collect() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sum of pair costs in canonical order (pairs normalized to `(min, max)`
    /// and sorted), so equal matchings always give bit-identical totals.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        let mut canon: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        canon.sort_unstable();
        canon.iter().map(|&(a, b)| self.get(a, b)).sum()
    }

    fn check(&self) -> Result<(), StratError> {
        if self.n % 2 == 1 {
            return Err(StratError::OddCount(self.n));
        }
        for i in 0..self.n {
            for j in 0..self.n {
                let c = self.get(i, j);
                if i != j && !(c.is_finite() && c >= 0.0) {
                    return Err(StratError::NonFiniteCost(i, j));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Pairs normalized to `(min, max)`, sorted.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Matching {
    fn new(cost: &CostMatrix, pairs: Vec<(usize, usize)>) -> Self {
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        pairs.sort_unstable();
        let total_cost = cost.total(&pairs);
        Matching { pairs, total_cost }
    }
}

/// Repeatedly pairs the cheapest remaining edge between two free units.
/// Ties go to the lexicographically smallest `(i, j)`.
fn greedy_global(cost: &CostMatrix) -> Vec<(usize, usize)> {
    let n = cost.len();
    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    edges.sort_by(|&(a, b), &(c, d)| cost.get(a, b).total_cmp(&cost.get(c, d)).then((a, b).cmp(&(c, d))));
    let mut free = vec![true; n];
    let mut pairs = Vec::with_capacity(n / 2);
    for (i, j) in edges {
        if free[i] && free[j] {
            free[i] = false;
            free[j] = false;
            pairs.push((i, j));
            if pairs.len() == n / 2 {
                break;
            }
        }
    }
    pairs
}

/// Walks units in `order`, pairing each free unit with its nearest free
/// unit (lowest index on ties).
fn greedy_in_order(cost: &CostMatrix, order: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let n = cost.len();
    let mut free = vec![true; n];
    let mut pairs = Vec::with_capacity(n / 2);
    for i in order {
        if !free[i] {
            continue;
        }
        free[i] = false;
        let mut best: Option<(usize, f64)> = None;
        for (j, _) in free.iter().enumerate().filter(|(_, f)| **f) {
            let c = cost.get(i, j);
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((j, c));
            }
        }
        let (j, _) = best.expect("even count leaves a partner");
        free[j] = false;
        pairs.push((i, j));
    }
    pairs
}

#[inline]
fn strictly_better(candidate: f64, current: f64) -> bool {
    candidate < current - 1e-12 * current.abs()
}

fn two_opt(cost: &CostMatrix, pairs: &mut [(usize, usize)]) {
    let k = pairs.len();
    loop {
        let mut improved = false;
        for a in 0..k {
            for b in (a + 1)..k {
                let (p, q) = pairs[a];
                let (r, s) = pairs[b];
                let current = cost.get(p, q) + cost.get(r, s);
                let cross = cost.get(p, r) + cost.get(q, s);
                let swap = cost.get(p, s) + cost.get(q, r);
                if cross <= swap {
                    if strictly_better(cross, current) {
                        pairs[a] = (p, r);
                        pairs[b] = (q, s);
                        improved = true;
                    }
                } else if strictly_better(swap, current) {
                    pairs[a] = (p, s);
                    pairs[b] = (q, r);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Greedy construction then 2-opt to a local optimum. Instances of up to
/// 128 units are restarted from several construction orders and the best
/// local optimum wins.
pub fn min_cost_pair_matching(cost: &CostMatrix) -> Result<Matching, StratError> {
    cost.check()?;
    let n = cost.len();
    let mut starts = vec![greedy_in_order(cost, 0..n)];
    if n <= MULTI_START_MAX_N {
        // small instances are cheap enough to restart from several orders
        starts.push(greedy_global(cost));
        for r in 1..n.min(STARTS) {
            starts.push(greedy_in_order(cost, (0..n).map(|i| (i + r * n / STARTS.min(n)) % n)));
        }
    }
    let best = starts
        .into_iter()
        .map(|mut pairs| {
            two_opt(cost, &mut pairs);
            Matching::new(cost, pairs)
        })
        .min_by(|a, b| a.total_cost.total_cmp(&b.total_cost))
        .expect("at least one start");
    Ok(best)
}

/// Exhaustive search over all `(n-1)!!` perfect matchings with
/// branch-and-bound pruning.
pub fn brute_force_matching(cost: &CostMatrix) -> Result<Matching, StratError> {
    cost.check()?;
    let n = cost.len();
    if n > BRUTE_FORCE_MAX {
        return Err(StratError::BruteForceTooLarge { max: BRUTE_FORCE_MAX, got: n });
    }
    struct Search<'a> {
        cost: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(f64, Vec<(usize, usize)>)>,
    }
    impl Search<'_> {
        fn run(&mut self, partial: f64) {
            let Some(i) = self.used.iter().position(|u| !u) else {
                let total = self.cost.total(&self.current);
                if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            };
            if let Some((b, _)) = &self.best {
                if partial > *b * (1.0 + 1e-9) {
                    return;
                }
            }
            self.used[i] = true;
            for j in (i + 1)..self.cost.len() {
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                self.current.push((i, j));
                self.run(partial + self.cost.get(i, j));
                self.current.pop();
                self.used[j] = false;
            }
            self.used[i] = false;
        }
    }
    let mut search = Search { cost, used: vec![false; n], current: Vec::with_capacity(n / 2), best: None };
    search.run(0.0);
    let pairs = search.best.map(|(_, p)| p).unwrap_or_default();
    Ok(Matching::new(cost, pairs))
}

/// Settings for the score/covariate trade-off cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridCostParams {
    /// Weight on the score term; `None` selects `1 / (k + 1)`.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub covariate_subset: Vec<String>,
    #[serde(default = "default_ridge")]
    pub ridge_epsilon: f64,
}

fn default_ridge() -> f64 {
    super::covariance::DEFAULT_RIDGE_EPSILON
}

impl HybridCostParams {
    pub fn validate(&self) -> Result<(), StratError> {
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(StratError::InvalidLambda(l));
            }
        }
        if self.covariate_subset.is_empty() && self.lambda != Some(1.0) {
            return Err(StratError::EmptyCovariateSubset);
        }
        Ok(())
    }
}

/// `1 / (k + 1)` for `k` covariate columns in the Mahalanobis term.
pub fn default_lambda(k: usize) -> f64 {
    1.0 / (k as f64 + 1.0)
}

/// `lambda (g_i - g_j)^2 / s_g^2 + (1 - lambda) (x_i - x_j)' S^-1 (x_i - x_j)`.
/// The score term is zero when `s_g_sq` is zero.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_pair_cost(
    i: usize,
    j: usize,
    g_hats: &[f64],
    s_g_sq: f64,
    x_vectors: &[Vec<f64>],
    sigma_inv: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64, StratError> {
    let score_term = if lambda > 0.0 && s_g_sq > 0.0 { (g_hats[i] - g_hats[j]).powi(2) / s_g_sq } else { 0.0 };
    let covariate_term =
        if lambda < 1.0 { squared_mahalanobis(&x_vectors[i], &x_vectors[j], sigma_inv)? } else { 0.0 };
    Ok(lambda * score_term + (1.0 - lambda) * covariate_term)
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Full hybrid cost matrix. `whitened` rows (see `Covariance::whiten`) stand
/// in for the quadratic form.
pub fn hybrid_cost_matrix(scores: Option<&[f64]>, whitened: Option<(&[f64], usize)>, lambda: f64) -> CostMatrix {
    let n = scores.map(<[f64]>::len).or(whitened.map(|(z, k)| z.len() / k.max(1))).unwrap_or(0);
    let s_g_sq = scores.map(sample_variance).unwrap_or(0.0);
    CostMatrix::from_fn(n, |i, j| {
        let score_term = match scores {
            Some(g) if lambda > 0.0 && s_g_sq > 0.0 => (g[i] - g[j]).powi(2) / s_g_sq,
            _ => 0.0,
        };
        let covariate_term = match whitened {
            Some((z, k)) if lambda < 1.0 => {
                let (zi, zj) = (&z[i * k..(i + 1) * k], &z[j * k..(j + 1) * k]);
                zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum()
            }
            _ => 0.0,
        };
        lambda * score_term + (1.0 - lambda) * covariate_term
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn matrix_1d(g: &[f64]) -> CostMatrix {
        CostMatrix::from_fn(g.len(), |i, j| (g[i] - g[j]).powi(2))
    }

    #[test]
    fn obvious_optimum() {
        let m = matrix_1d(&[0.0, 1.0, 10.0, 11.0]);
        let heuristic = min_cost_pair_matching(&m).unwrap();
        assert_eq!(heuristic.pairs, vec![(0, 1), (2, 3)]);
        assert_eq!(heuristic.total_cost, 2.0);
        assert_eq!(brute_force_matching(&m).unwrap(), heuristic);
    }

    #[test]
    fn equal_costs_any_perfect_matching() {
        let m = CostMatrix::from_fn(8, |_, _| 2.5);
        let r = min_cost_pair_matching(&m).unwrap();
        assert_eq!(r.pairs.len(), 4);
        assert_eq!(r.total_cost, 4.0 * 2.5);
        let mut seen: Vec<usize> = r.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_odd_and_bad_costs() {
        assert_eq!(min_cost_pair_matching(&matrix_1d(&[1.0, 2.0, 3.0])), Err(StratError::OddCount(3)));
        let mut rows = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        rows[0][1] = f64::NAN;
        assert_eq!(min_cost_pair_matching(&CostMatrix::from_rows(&rows)), Err(StratError::NonFiniteCost(0, 1)));
        rows[0][1] = -1.0;
        assert!(min_cost_pair_matching(&CostMatrix::from_rows(&rows)).is_err());
        assert!(matches!(
            brute_force_matching(&matrix_1d(&[0.0; 16])),
            Err(StratError::BruteForceTooLarge { .. })
        ));
    }

    #[test]
    fn brute_force_counts_all_matchings_on_small_case() {
        // weights make every one of the 3 matchings of 4 nodes distinct
        let rows = vec![
            vec![0.0, 5.0, 1.0, 9.0],
            vec![5.0, 0.0, 7.0, 2.0],
            vec![1.0, 7.0, 0.0, 4.0],
            vec![9.0, 2.0, 4.0, 0.0],
        ];
        let m = CostMatrix::from_rows(&rows);
        // (0,1)(2,3)=9, (0,2)(1,3)=3, (0,3)(1,2)=16
        let best = brute_force_matching(&m).unwrap();
        assert_eq!(best.pairs, vec![(0, 2), (1, 3)]);
        assert_eq!(best.total_cost, 3.0);
    }

    #[test]
    fn lambda_heuristic() {
        assert_eq!(default_lambda(1), 0.5);
        assert_eq!(default_lambda(9), 0.1);
        assert_eq!(default_lambda(0), 1.0);
    }

    #[test]
    fn hybrid_cost_limits() {
        let g = vec![0.0, 2.0, 5.0];
        let x = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![1.0, 1.0]];
        let eye = DMatrix::identity(2, 2);
        let s = sample_variance(&g);
        let pure_score = hybrid_pair_cost(0, 1, &g, s, &x, &eye, 1.0).unwrap();
        assert_eq!(pure_score, 4.0 / s);
        let pure_x = hybrid_pair_cost(0, 1, &g, s, &x, &eye, 0.0).unwrap();
        assert_eq!(pure_x, 25.0);
        let same = hybrid_pair_cost(0, 0, &g, s, &x, &eye, 0.5).unwrap();
        assert_eq!(same, 0.0);
        assert_eq!(hybrid_pair_cost(0, 1, &g, 0.0, &x, &eye, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn score_term_is_scale_invariant() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let g: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let eye = DMatrix::identity(1, 1);
        for c in [-3.0, 0.01, 250.0] {
            let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
            for (i, j) in [(0, 1), (4, 9), (11, 3)] {
                let a = hybrid_pair_cost(i, j, &g, sample_variance(&g), &x, &eye, 0.3).unwrap();
                let b = hybrid_pair_cost(i, j, &scaled, sample_variance(&scaled), &x, &eye, 0.3).unwrap();
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn matrix_agrees_with_direct_cost() {
        let g = vec![0.3, -1.0, 2.0, 0.7];
        let x = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![1.0, 1.0], vec![-0.5, 0.25]];
        let eye = DMatrix::identity(2, 2);
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let m = hybrid_cost_matrix(Some(&g), Some((&flat, 2)), 0.4);
        let s = sample_variance(&g);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let direct = hybrid_pair_cost(i, j, &g, s, &x, &eye, 0.4).unwrap();
                    assert!((m.get(i, j) - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sorted_adjacent_is_optimal_in_one_dimension() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        for n in [4, 6, 8, 10, 12] {
            for _ in 0..10 {
                let g: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
                let m = matrix_1d(&g);
                let order = super::super::sorted_order(&g);
                let adjacent: Vec<(usize, usize)> = order.chunks(2).map(|c| (c[0], c[1])).collect();
                let exact = brute_force_matching(&m).unwrap();
                assert_eq!(m.total(&adjacent), exact.total_cost);
                assert_eq!(min_cost_pair_matching(&m).unwrap().total_cost, exact.total_cost);
            }
        }
    }

    #[test]
    fn heuristic_close_to_exact_on_random_instances() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(500);
        let mut within = 0;
        for _ in 0..500 {
            let n = 2 * rng.random_range(2..=5);
            let w: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
            let m = CostMatrix::from_fn(n, |i, j| w[i * n + j]);
            let exact = brute_force_matching(&m).unwrap().total_cost;
            let heuristic = min_cost_pair_matching(&m).unwrap().total_cost;
            assert!(heuristic >= exact - 1e-12);
            if heuristic <= 1.05 * exact {
                within += 1;
            }
        }
        assert!(within >= 475, "{within} of 500 within 5%");
    }

    #[test]
    fn params_validation() {
        let p = |lambda, subset: &[&str]| HybridCostParams {
            lambda,
            covariate_subset: subset.iter().map(|s| s.to_string()).collect(),
            ridge_epsilon: 1e-8,
        };
        assert!(p(Some(0.5), &["a"]).validate().is_ok());
        assert!(p(None, &["a"]).validate().is_ok());
        assert_eq!(p(Some(1.5), &["a"]).validate(), Err(StratError::InvalidLambda(1.5)));
        assert_eq!(p(Some(0.5), &[]).validate(), Err(StratError::EmptyCovariateSubset));
        assert!(p(Some(1.0), &[]).validate().is_ok());
    }
}
