//! Average treatment effect estimators.
//!
//! Every estimator takes a [`CausalDataset`] whose `covariates` are whatever the
//! pipeline adjusts for: raw noisy covariates, estimated confounders or the true
//! confounders. The regression, logistic-propensity and Mahalanobis estimators
//! are invariant to invertible affine maps of the covariates, which is what lets
//! confounders identified only up to a linear transformation be used directly.

mod bias;
mod matching;
mod propensity;
mod regression;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use bias::{bias_oracle, logistic_gaussian_moments, simulate_moments, MomentEstimate, TreatmentMoments};
pub use matching::{mahalanobis_match_ate, nearest_opposite, propensity_match_ate, MatchDistance};
pub use propensity::{
    doubly_robust_ate, fit_logistic, ipw_ate, logistic_outcome_ate, logistic_propensity, LogisticFit,
    DEFAULT_CLIP,
};
pub use regression::{known_v_estimate, lasso_ate, lasso_penalty_max, ols_ate, ridge_ate};

/// Relative singular-value threshold for the full-column-rank checks.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CausalDataset {
    covariates: DMatrix<f64>,
    treatment: DVector<f64>,
    outcome: DVector<f64>,
    true_confounders: Option<DMatrix<f64>>,
    potential_outcomes: Option<Vec<(f64, f64)>>,
}

impl CausalDataset {
    /// `treatment` must be 0/1 and all lengths must agree.
    pub fn new(covariates: DMatrix<f64>, treatment: DVector<f64>, outcome: DVector<f64>) -> Result<Self> {
        let n = treatment.len();
        if covariates.nrows() != n || outcome.len() != n {
            return invalid(format!(
                "length mismatch: {} covariate rows, {} treatments, {} outcomes",
                covariates.nrows(),
                n,
                outcome.len()
            ));
        }
        if let Some(t) = treatment.iter().find(|t| **t != 0.0 && **t != 1.0) {
            return invalid(format!("treatment must be 0 or 1, got {t}"));
        }
        if outcome.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return invalid("covariates and outcomes must be finite");
        }
        Ok(Self { covariates, treatment, outcome, true_confounders: None, potential_outcomes: None })
    }

    pub fn with_true_confounders(mut self, u: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != self.len() {
            return invalid("true confounders have the wrong number of rows");
        }
        self.true_confounders = Some(u);
        Ok(self)
    }

    /// Pairs of `(Y(0), Y(1))`.
    pub fn with_potential_outcomes(mut self, po: Vec<(f64, f64)>) -> Result<Self> {
        if po.len() != self.len() {
            return invalid("potential outcomes have the wrong length");
        }
        self.potential_outcomes = Some(po);
        Ok(self)
    }

    /// Same units, different adjustment covariates.
    pub fn with_covariates(&self, covariates: DMatrix<f64>) -> Result<Self> {
        if covariates.nrows() != self.len() {
            return invalid("replacement covariates have the wrong number of rows");
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return invalid("covariates must be finite");
        }
        let mut out = self.clone();
        out.covariates = covariates;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.treatment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatment.is_empty()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatment(&self) -> &DVector<f64> {
        &self.treatment
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.outcome
    }

    pub fn true_confounders(&self) -> Option<&DMatrix<f64>> {
        self.true_confounders.as_ref()
    }

    pub fn potential_outcomes(&self) -> Option<&[(f64, f64)]> {
        self.potential_outcomes.as_deref()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|t| **t == 1.0).count()
    }

    /// Sample ATE from the potential outcomes, when available.
    pub fn sample_ate(&self) -> Option<f64> {
        self.potential_outcomes
            .as_ref()
            .map(|po| po.iter().map(|(y0, y1)| y1 - y0).sum::<f64>() / po.len() as f64)
    }

    pub(crate) fn require_both_arms(&self) -> Result<()> {
        let treated = self.n_treated();
        if treated == 0 {
            return Err(Error::EmptyArm { arm: 1 });
        }
        if treated == self.len() {
            return Err(Error::EmptyArm { arm: 0 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub method: String,
    pub tau_hat: f64,
    pub n_used: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

impl AteReport {
    pub(crate) fn new(method: impl Into<String>, tau_hat: f64, n_used: usize) -> Result<Self> {
        let method = method.into();
        if !tau_hat.is_finite() {
            return invalid(format!("{method} produced a non-finite estimate"));
        }
        Ok(Self { method, tau_hat, n_used, diagnostics: BTreeMap::new() })
    }

    pub(crate) fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }
}

/// Measurement model for generated covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateNoise {
    /// `X_ij ~ N(U_i . V_j, sd^2)`, the additive model `X = U V^T + W`.
    Gaussian { sd: f64 },
    /// `X_ij = +1` with probability `sigmoid(U_i . V_j)`, else `-1`.
    Bernoulli,
}

/// Linear structural model for synthetic studies:
/// `U_ij ~ N(0, 1)`, `T_i ~ Bernoulli(sigmoid(beta . U_i))`,
/// `Y_i ~ N(alpha . U_i + tau T_i, outcome_noise_sd^2)`, covariates from `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: f64,
    pub outcome_noise_sd: f64,
    /// `p x r` loading matrix `V`.
    pub loadings: DMatrix<f64>,
    pub noise: CovariateNoise,
}

pub const DEFAULT_ALPHA: [f64; 5] = [-2.0, 3.0, -2.0, -3.0, -2.0];
pub const DEFAULT_BETA: [f64; 5] = [1.0, 2.0, 2.0, 2.0, 2.0];
pub const DEFAULT_TAU: f64 = 2.0;
/// Variance of the Gaussian covariate noise in the default synthetic design.
pub const DEFAULT_GAUSSIAN_NOISE_VARIANCE: f64 = 5.0;

impl GenerativeSpec {
    pub fn new(
        alpha: Vec<f64>,
        beta: Vec<f64>,
        tau: f64,
        outcome_noise_sd: f64,
        loadings: DMatrix<f64>,
        noise: CovariateNoise,
    ) -> Result<Self> {
        let r = alpha.len();
        if r == 0 || beta.len() != r || loadings.ncols() != r {
            return invalid(format!(
                "inconsistent dimensions: alpha {}, beta {}, loadings {}x{}",
                r,
                beta.len(),
                loadings.nrows(),
                loadings.ncols()
            ));
        }
        if !(outcome_noise_sd >= 0.0) {
            return invalid("outcome noise sd must be non-negative");
        }
        if let CovariateNoise::Gaussian { sd } = noise {
            if !(sd >= 0.0) {
                return invalid("measurement noise sd must be non-negative");
            }
        }
        Ok(Self { alpha, beta, tau, outcome_noise_sd, loadings, noise })
    }

    /// Default coefficients (`r = 5`, `tau = 2`) with the given loadings.
    pub fn with_default_coefficients(loadings: DMatrix<f64>, noise: CovariateNoise) -> Result<Self> {
        Self::new(DEFAULT_ALPHA.to_vec(), DEFAULT_BETA.to_vec(), DEFAULT_TAU, 1.0, loadings, noise)
    }

    pub fn r(&self) -> usize {
        self.alpha.len()
    }

    pub fn p(&self) -> usize {
        self.loadings.nrows()
    }
}

/// Prepends an intercept column.
pub(crate) fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, x.ncols() + 1);
    d.column_mut(0).fill(1.0);
    d.columns_mut(1, x.ncols()).copy_from(x);
    d
}

pub(crate) fn covariate_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("covariate[{j}]")).collect()
}
