//! Synthetic data: the linear structural model with noisy proxies, MCAR
//! missingness, and the twins semi-synthetic protocol.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimators::{CausalDataset, CovariateNoise, GenerativeSpec};
use crate::linalg::sigmoid;
use crate::mf::{Entry, LossKind, ObservedMatrix};
use crate::rng::{keyed_uniform, rng_for, stable_hash, tag};

/// `p x r` loadings with i.i.d. standard normal entries, a function of `(seed, p, r)` only.
pub fn random_loadings(p: usize, r: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_for(seed, &[tag::LOADINGS, p as u64, r as u64]);
    let mut v = DMatrix::zeros(p, r);
    for i in 0..p {
        for j in 0..r {
            v[(i, j)] = rng.sample(StandardNormal);
        }
    }
    v
}

/// Default linear design (`r = 5`) with loadings drawn by [`random_loadings`].
pub fn default_linear_spec(p: usize, noise: CovariateNoise, seed: u64) -> Result<GenerativeSpec> {
    GenerativeSpec::with_default_coefficients(random_loadings(p, 5, seed), noise)
}

/// One draw of the linear structural model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSample {
    /// Covariates are the dense proxies `X`; true confounders and potential outcomes attached.
    pub data: CausalDataset,
    pub observed: ObservedMatrix,
    pub loadings: DMatrix<f64>,
}

/// Column loss matching the covariate noise model.
pub fn noise_loss(noise: CovariateNoise) -> LossKind {
    match noise {
        CovariateNoise::Gaussian { sd } if sd > 0.0 => LossKind::Gaussian { variance: sd * sd },
        CovariateNoise::Gaussian { .. } => LossKind::UNIT_GAUSSIAN,
        CovariateNoise::Bernoulli => LossKind::Bernoulli,
    }
}

/// Draws `n` units: `U ~ N(0, I_r)`, `T ~ Bernoulli(sigmoid(beta . U))`,
/// `Y = alpha . U + tau T + eps`, and proxies `X` from `spec.noise` with
/// natural parameter `U V^T`. Fully observed.
pub fn gen_linear_scm(n: usize, spec: &GenerativeSpec, seed: u64) -> Result<LinearSample> {
    let (r, p) = (spec.r(), spec.p());
    if n == 0 {
        return invalid("sample size must be positive");
    }
    let mut rng = rng_for(seed, &[tag::SCM]);
    let mut u = DMatrix::<f64>::zeros(n, r);
    let mut t = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut po = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..r {
            u[(i, j)] = rng.sample(StandardNormal);
        }
        let row = u.row(i);
        let eta: f64 = row.iter().zip(&spec.beta).map(|(a, b)| a * b).sum();
        t[i] = f64::from(rng.random::<f64>() < sigmoid(eta));
        let base: f64 = row.iter().zip(&spec.alpha).map(|(a, b)| a * b).sum();
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * spec.outcome_noise_sd;
        let y0 = base + eps;
        let y1 = y0 + spec.tau;
        y[i] = if t[i] == 1.0 { y1 } else { y0 };
        po.push((y0, y1));
    }
    let theta = &u * spec.loadings.transpose();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = match spec.noise {
                CovariateNoise::Gaussian { sd } => theta[(i, j)] + sd * rng.sample::<f64, _>(StandardNormal),
                CovariateNoise::Bernoulli => {
                    if rng.random::<f64>() < sigmoid(theta[(i, j)]) {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
        }
    }
    let observed = ObservedMatrix::from_dense(&x, vec![noise_loss(spec.noise); p])?;
    let data = CausalDataset::new(x, t, y)?.with_true_confounders(u)?.with_potential_outcomes(po)?;
    Ok(LinearSample { data, observed, loadings: spec.loadings.clone() })
}

/// Drops each observed entry independently with probability `prob`.
///
/// The decision for entry `(i, j)` is a counter-based uniform keyed by
/// `(seed, i, hash(column name))`, so it does not depend on entry order and
/// commutes with column permutation.
pub fn inject_mcar(obs: &ObservedMatrix, prob: f64, seed: u64) -> Result<ObservedMatrix> {
    if !(0.0..=1.0).contains(&prob) {
        return invalid(format!("missing probability must lie in [0, 1], got {prob}"));
    }
    let hashes: Vec<u64> = obs.col_names().iter().map(|s| stable_hash(s)).collect();
    let kept: Vec<Entry> = obs
        .entries()
        .iter()
        .filter(|e| keyed_uniform(seed, &[tag::MCAR, e.row as u64, hashes[e.col]]) >= prob)
        .copied()
        .collect();
    Ok(obs.with_entries(kept))
}

/// One twin pair: ordinal gestation category and both twins' outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinsRecord {
    pub pair_id: u64,
    pub gestat10: u8,
    pub weight_lighter: f64,
    pub weight_heavier: f64,
    pub mortality_lighter: u8,
    pub mortality_heavier: u8,
}

/// Proxy construction for the twins protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinsOptions {
    /// Number of proxy copies of the gestation category.
    pub p: usize,
    /// Probability that a proxy entry is replaced by a uniform draw from `0..=9`.
    pub perturb_prob: f64,
    /// MCAR probability applied to the proxies.
    pub missing_prob: f64,
}

impl Default for TwinsOptions {
    fn default() -> Self {
        Self { p: 10, perturb_prob: 0.5, missing_prob: 0.0 }
    }
}

/// Treatment probability `sigmoid(5 (u / 10 - 0.1))`.
pub fn twins_treatment_prob(u: f64) -> f64 {
    sigmoid(5.0 * (u / 10.0 - 0.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinsSample {
    /// Covariates are the proxies with missing cells set to zero; `observed`
    /// carries the missingness pattern.
    pub data: CausalDataset,
    pub observed: ObservedMatrix,
}

/// Hides one twin per pair: `T = 1` (heavier twin observed) with probability
/// [`twins_treatment_prob`] of the gestation category, and builds `p` noisy
/// proxies of that category.
pub fn twins_semi_synth(records: &[TwinsRecord], opts: &TwinsOptions, seed: u64) -> Result<TwinsSample> {
    if records.is_empty() {
        return invalid("no twin records");
    }
    if opts.p == 0 {
        return invalid("need at least one proxy column");
    }
    if !(0.0..=1.0).contains(&opts.perturb_prob) {
        return invalid("perturbation probability must lie in [0, 1]");
    }
    let n = records.len();
    let mut rng = rng_for(seed, &[tag::TWINS]);
    let mut t = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut u = DMatrix::zeros(n, 1);
    let mut po = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, opts.p);
    for (i, rec) in records.iter().enumerate() {
        if rec.gestat10 > 9 {
            return invalid(format!("pair {}: gestat10 {} outside 0..=9", rec.pair_id, rec.gestat10));
        }
        if rec.mortality_lighter > 1 || rec.mortality_heavier > 1 {
            return invalid(format!("pair {}: mortality must be 0 or 1", rec.pair_id));
        }
        let g = f64::from(rec.gestat10);
        u[(i, 0)] = g;
        t[i] = f64::from(rng.random::<f64>() < twins_treatment_prob(g));
        let (y0, y1) = (f64::from(rec.mortality_lighter), f64::from(rec.mortality_heavier));
        y[i] = if t[i] == 1.0 { y1 } else { y0 };
        po.push((y0, y1));
        for j in 0..opts.p {
            x[(i, j)] = if rng.random::<f64>() < opts.perturb_prob { f64::from(rng.random_range(0u8..10)) } else { g };
        }
    }
    let mut observed = ObservedMatrix::from_dense(&x, vec![LossKind::UNIT_GAUSSIAN; opts.p])?;
    if opts.missing_prob > 0.0 {
        observed = inject_mcar(&observed, opts.missing_prob, seed)?;
    }
    let data = CausalDataset::new(observed.to_dense(0.0), t, y)?
        .with_true_confounders(u)?
        .with_potential_outcomes(po)?;
    Ok(TwinsSample { data, observed })
}

/// Parameters of the synthetic twins population used when no real data is supplied.
///
/// `gestat10` is uniform on `0..=9`; each twin dies independently with
/// probability `sigmoid(intercept - slope * gestat10 + effect * heavier)`.
/// Birth weights are `0.9 + 0.1 * gestat10` kg plus noise for the lighter twin,
/// with the heavier twin `0.05..0.3` kg heavier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandinParams {
    pub intercept: f64,
    pub slope: f64,
    pub effect: f64,
}

pub const STANDIN: StandinParams = StandinParams { intercept: 0.5, slope: 0.5, effect: -0.3 };

impl StandinParams {
    pub fn mortality_prob(&self, gestat10: u8, heavier: bool) -> f64 {
        let h = if heavier { self.effect } else { 0.0 };
        sigmoid(self.intercept - self.slope * f64::from(gestat10) + h)
    }

    /// Population ATE of being the heavier twin.
    pub fn analytic_ate(&self) -> f64 {
        (0u8..10).map(|g| self.mortality_prob(g, true) - self.mortality_prob(g, false)).sum::<f64>() / 10.0
    }
}

/// Draws `n_pairs` stand-in twin records from [`STANDIN`].
pub fn synth_twins_standin(n_pairs: usize, seed: u64) -> Vec<TwinsRecord> {
    let mut rng = rng_for(seed, &[tag::STANDIN]);
    (0..n_pairs)
        .map(|i| {
            let g: u8 = rng.random_range(0..10);
            let light = 0.9 + 0.1 * f64::from(g) + 0.1 * rng.sample::<f64, _>(StandardNormal);
            let heavy = light + rng.random_range(0.05..0.3);
            let ml = u8::from(rng.random::<f64>() < STANDIN.mortality_prob(g, false));
            let mh = u8::from(rng.random::<f64>() < STANDIN.mortality_prob(g, true));
            TwinsRecord {
                pair_id: i as u64,
                gestat10: g,
                weight_lighter: (light * 1000.0).round() / 1000.0,
                weight_heavier: (heavy * 1000.0).round() / 1000.0,
                mortality_lighter: ml,
                mortality_heavier: mh,
            }
        })
        .collect()
}
