//! Linear synthetic data-generating process with closed-form moments.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{HarnessError, ImputedSample, Provenance};
use crate::data::FeatureMatrix;
use crate::rng::{domain, stream};

/// `Y(d) = alpha d + beta'x + d gamma'x + eps`, `x ~ N(0, I)`,
/// `eps ~ N(0, noise_sd^2)` shared by both potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDgp {
    pub dim: usize,
    #[serde(default)]
    pub alpha: f64,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    pub noise_sd: f64,
}

/// Synthetic units with their covariates and the exact `g*(x)`.
#[derive(Debug, Clone)]
pub struct SyntheticDraw {
    pub sample: ImputedSample,
    pub g_star: Vec<f64>,
}

pub fn make_linear_dgp(
    dim: usize,
    beta: Vec<f64>,
    noise_sd: f64,
    alpha: f64,
    gamma: Option<Vec<f64>>,
) -> Result<LinearDgp, HarnessError> {
    let dgp = LinearDgp { dim, alpha, beta, gamma, noise_sd };
    dgp.validate()?;
    Ok(dgp)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearDgp {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(HarnessError::InvalidDgp(format!("noise_sd must be nonnegative, got {}", self.noise_sd)));
        }
        if self.dim == 0 {
            return Err(HarnessError::InvalidDgp("dim must be at least 1".into()));
        }
        if self.beta.len() != self.dim || self.gamma.as_ref().is_some_and(|g| g.len() != self.dim) {
            return Err(HarnessError::InvalidDgp(format!("coefficient vectors must have length {}", self.dim)));
        }
        Ok(())
    }

    fn gamma(&self) -> Vec<f64> {
        self.gamma.clone().unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// `E[Y(1) + Y(0) | x] = alpha + (2 beta + gamma)'x`.
    pub fn g_star(&self, x: &[f64]) -> f64 {
        let g = self.gamma();
        self.alpha + x.iter().enumerate().map(|(j, v)| (2.0 * self.beta[j] + g[j]) * v).sum::<f64>()
    }

    pub fn var_y1(&self) -> f64 {
        let bg: Vec<f64> = self.beta.iter().zip(self.gamma()).map(|(b, g)| b + g).collect();
        dot(&bg, &bg) + self.noise_sd.powi(2)
    }

    pub fn var_y0(&self) -> f64 {
        dot(&self.beta, &self.beta) + self.noise_sd.powi(2)
    }

    /// `Var(E[Y(1) + Y(0) | g*])`, which equals `Var(g*)`.
    pub fn var_g_star(&self) -> f64 {
        let w: Vec<f64> = self.beta.iter().zip(self.gamma()).map(|(b, g)| 2.0 * b + g).collect();
        dot(&w, &w)
    }

    /// Population average effect.
    pub fn tau(&self) -> f64 {
        self.alpha
    }

    /// Per-pair asymptotic variance of the paired estimator with exact-score pairing.
    pub fn v_paired(&self) -> f64 {
        self.var_y1() + self.var_y0() - 0.5 * self.var_g_star()
    }

    /// Per-pair asymptotic variance under complete randomization.
    pub fn v_simple(&self) -> f64 {
        self.var_y1() + self.var_y0()
    }

    pub fn theoretical_ratio(&self) -> Result<f64, HarnessError> {
        Ok(crate::estimation::theoretical_variance_ratio(self.var_y1(), self.var_y0(), self.var_g_star())?)
    }

    /// Draws `n` units. Pure function of `(self, n, seed)`.
    pub fn sample(&self, n: usize, seed: u64) -> SyntheticDraw {
        let mut rng = stream(seed, &[domain::DGP]);
        let gamma = self.gamma();
        let width = n.to_string().len();
        let mut rows = Vec::with_capacity(n);
        let (mut y0, mut y1, mut g_star) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let x: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z: f64 = StandardNormal.sample(&mut rng);
            let eps = self.noise_sd * z;
            let base = dot(&self.beta, &x) + eps;
            y0.push(base);
            y1.push(base + self.alpha + dot(&gamma, &x));
            g_star.push(self.g_star(&x));
            rows.push(x);
        }
        let names = (1..=self.dim).map(|j| format!("x{j}")).collect();
        SyntheticDraw {
            sample: ImputedSample {
                unit_ids: (0..n).map(|i| format!("s{i:0width$}")).collect(),
                y0,
                y1,
                provenance: vec![Provenance::Synthetic; n],
                covariates: Some(FeatureMatrix::from_rows(names, &rows)),
                fallback_used: false,
            },
            g_star,
        }
    }
}
