//! Matrix data model and exponential-family losses shared by the solvers.
//!
//! Each covariate column carries a [`LossKind`]: the negative log-likelihood of
//! a natural exponential family in its natural parameter `phi`, with every
//! `phi`-independent term dropped. Only objective differences are ever compared,
//! so the dropped terms never matter.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{nuclear_norm, sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    /// `(x - phi)^2 / (2 variance)`.
    Gaussian { variance: f64 },
    /// `log(1 + exp(-x phi))` for `x` in `{-1, +1}`.
    Bernoulli,
    /// `exp(phi) - x phi` for non-negative integer `x`.
    Poisson,
}

impl LossKind {
    pub const UNIT_GAUSSIAN: LossKind = LossKind::Gaussian { variance: 1.0 };

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Gaussian { .. } => "gaussian",
            LossKind::Bernoulli => "bernoulli",
            LossKind::Poisson => "poisson",
        }
    }

    /// Checks that `x` lies in the support of the family.
    pub fn validate(&self, x: f64) -> Result<()> {
        let ok = match *self {
            LossKind::Gaussian { variance } => {
                if !(variance > 0.0 && variance.is_finite()) {
                    return invalid(format!("gaussian variance must be positive, got {variance}"));
                }
                x.is_finite()
            }
            LossKind::Bernoulli => x == 1.0 || x == -1.0,
            LossKind::Poisson => x >= 0.0 && x.is_finite() && x.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain { kind: self.name(), value: x })
        }
    }

    /// Log-partition function `G(phi)`, up to the same dropped constants as the loss.
    pub fn log_partition(&self, phi: f64) -> f64 {
        match *self {
            LossKind::Gaussian { variance } => phi * phi / (2.0 * variance),
            LossKind::Bernoulli => softplus(phi) + softplus(-phi),
            LossKind::Poisson => phi.exp(),
        }
    }

    /// Loss without support validation; callers must have validated `x`.
    #[inline]
    pub fn value_unchecked(&self, x: f64, phi: f64) -> f64 {
        match *self {
            LossKind::Gaussian { variance } => {
                let r = x - phi;
                r * r / (2.0 * variance)
            }
            LossKind::Bernoulli => softplus(-x * phi),
            LossKind::Poisson => phi.exp() - x * phi,
        }
    }

    #[inline]
    pub fn grad_unchecked(&self, x: f64, phi: f64) -> f64 {
        match *self {
            LossKind::Gaussian { variance } => (phi - x) / variance,
            LossKind::Bernoulli => -x * sigmoid(-x * phi),
            LossKind::Poisson => phi.exp() - x,
        }
    }

    /// Second derivative of the loss in `phi`; independent of `x` for every family.
    #[inline]
    pub fn hess(&self, phi: f64) -> f64 {
        match *self {
            LossKind::Gaussian { variance } => 1.0 / variance,
            LossKind::Bernoulli => {
                let s = sigmoid(phi);
                s * (1.0 - s)
            }
            LossKind::Poisson => phi.exp(),
        }
    }
}

/// Negative log-likelihood of `x` at natural parameter `phi`, constants dropped.
pub fn loss_value(kind: LossKind, x: f64, phi: f64) -> Result<f64> {
    kind.validate(x)?;
    if !phi.is_finite() {
        return invalid(format!("natural parameter must be finite, got {phi}"));
    }
    Ok(kind.value_unchecked(x, phi))
}

/// Derivative of [`loss_value`] in `phi`.
pub fn loss_grad(kind: LossKind, x: f64, phi: f64) -> Result<f64> {
    kind.validate(x)?;
    if !phi.is_finite() {
        return invalid(format!("natural parameter must be finite, got {phi}"));
    }
    Ok(kind.grad_unchecked(x, phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Partially observed `N x p` covariate matrix with per-column loss kinds.
///
/// Immutable after construction. Column names give each column an identity that
/// survives permutation; missingness injection keys its random stream by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
    col_losses: Vec<LossKind>,
    col_names: Vec<String>,
    na_token: String,
}

pub const DEFAULT_NA_TOKEN: &str = "NA";

pub fn default_col_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

impl ObservedMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        entries: Vec<Entry>,
        col_losses: Vec<LossKind>,
    ) -> Result<Self> {
        Self::with_names(n_rows, n_cols, entries, col_losses, default_col_names(n_cols))
    }

    pub fn with_names(
        n_rows: usize,
        n_cols: usize,
        entries: Vec<Entry>,
        col_losses: Vec<LossKind>,
        col_names: Vec<String>,
    ) -> Result<Self> {
        if col_losses.len() != n_cols {
            return invalid(format!("{} column losses for {n_cols} columns", col_losses.len()));
        }
        if col_names.len() != n_cols {
            return invalid(format!("{} column names for {n_cols} columns", col_names.len()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.row >= n_rows || e.col >= n_cols {
                return invalid(format!(
                    "entry ({}, {}) outside {n_rows}x{n_cols} grid",
                    e.row, e.col
                ));
            }
            if !seen.insert((e.row, e.col)) {
                return invalid(format!("duplicate entry ({}, {})", e.row, e.col));
            }
            col_losses[e.col].validate(e.value)?;
        }
        Ok(Self {
            n_rows,
            n_cols,
            entries,
            col_losses,
            col_names,
            na_token: DEFAULT_NA_TOKEN.to_string(),
        })
    }

    /// Fully observed matrix.
    pub fn from_dense(x: &DMatrix<f64>, col_losses: Vec<LossKind>) -> Result<Self> {
        Self::from_dense_masked(x, |_, _| true, col_losses)
    }

    /// Observes the cells of `x` for which `observed(i, j)` holds.
    pub fn from_dense_masked(
        x: &DMatrix<f64>,
        observed: impl Fn(usize, usize) -> bool,
        col_losses: Vec<LossKind>,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..p {
                if observed(i, j) {
                    entries.push(Entry { row: i, col: j, value: x[(i, j)] });
                }
            }
        }
        Self::new(n, p, entries, col_losses)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn n_observed(&self) -> usize {
        self.entries.len()
    }

    pub fn col_losses(&self) -> &[LossKind] {
        &self.col_losses
    }

    pub fn col_names(&self) -> &[String] {
        &self.col_names
    }

    pub fn na_token(&self) -> &str {
        &self.na_token
    }

    pub fn with_na_token(mut self, token: impl Into<String>) -> Self {
        self.na_token = token.into();
        self
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.n_rows * self.n_cols
    }

    /// `N p / |Omega|`, the factor that puts the data term on the full-matrix scale.
    pub fn scale_factor(&self) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::EmptyObservation);
        }
        Ok((self.n_rows * self.n_cols) as f64 / self.entries.len() as f64)
    }

    /// Dense copy with unobserved cells set to `fill`.
    pub fn to_dense(&self, fill: f64) -> DMatrix<f64> {
        let mut m = DMatrix::from_element(self.n_rows, self.n_cols, fill);
        for e in &self.entries {
            m[(e.row, e.col)] = e.value;
        }
        m
    }

    pub fn mask(&self) -> DMatrix<bool> {
        let mut m = DMatrix::from_element(self.n_rows, self.n_cols, false);
        for e in &self.entries {
            m[(e.row, e.col)] = true;
        }
        m
    }

    /// Same grid and column metadata, different entry set.
    pub fn with_entries(&self, entries: Vec<Entry>) -> Self {
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            entries,
            col_losses: self.col_losses.clone(),
            col_names: self.col_names.clone(),
            na_token: self.na_token.clone(),
        }
    }

    /// Column `perm[j]` of `self` becomes column `j` of the result.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_cols {
            return invalid("permutation length must equal column count");
        }
        let mut inverse = vec![usize::MAX; self.n_cols];
        for (new, &old) in perm.iter().enumerate() {
            if old >= self.n_cols || inverse[old] != usize::MAX {
                return invalid("not a permutation");
            }
            inverse[old] = new;
        }
        let entries = self
            .entries
            .iter()
            .map(|e| Entry { row: e.row, col: inverse[e.col], value: e.value })
            .collect();
        Ok(Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            entries,
            col_losses: perm.iter().map(|&o| self.col_losses[o]).collect(),
            col_names: perm.iter().map(|&o| self.col_names[o].clone()).collect(),
            na_token: self.na_token.clone(),
        })
    }
}

/// Dense `N x p` natural-parameter matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParamMatrix(DMatrix<f64>);

impl NaturalParamMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("natural parameter matrix has non-finite entries");
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        Self(DMatrix::zeros(n, p))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn nuclear_norm(&self) -> f64 {
        nuclear_norm(&self.0)
    }
}

/// Factors `left` (`N x k`) and `right` (`p x k`) of a rank-`k` estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl FactorPair {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>) -> Result<Self> {
        if left.ncols() != right.ncols() {
            return invalid(format!(
                "factor widths differ: {} vs {}",
                left.ncols(),
                right.ncols()
            ));
        }
        Ok(Self { left, right })
    }

    pub fn k(&self) -> usize {
        self.left.ncols()
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn right(&self) -> &DMatrix<f64> {
        &self.right
    }

    /// `left * right^T`.
    pub fn product(&self) -> Result<NaturalParamMatrix> {
        NaturalParamMatrix::new(&self.left * self.right.transpose())
    }
}

/// Smooth part of the EFMC objective: `(N p / |Omega|) * sum of observed losses`.
pub fn data_term(obs: &ObservedMatrix, phi: &DMatrix<f64>) -> Result<f64> {
    let c = obs.scale_factor()?;
    check_shape(obs, phi)?;
    let losses = obs.col_losses();
    let sum: f64 = obs
        .entries()
        .iter()
        .map(|e| losses[e.col].value_unchecked(e.value, phi[(e.row, e.col)]))
        .sum();
    Ok(c * sum)
}

/// Nuclear-norm regularized EFMC objective.
pub fn objective(obs: &ObservedMatrix, phi: &NaturalParamMatrix, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    let data = data_term(obs, phi.values())?;
    let penalty = if lambda == 0.0 { 0.0 } else { lambda * phi.nuclear_norm() };
    Ok(data + penalty)
}

pub(crate) fn check_shape(obs: &ObservedMatrix, phi: &DMatrix<f64>) -> Result<()> {
    if phi.shape() != (obs.n_rows(), obs.n_cols()) {
        return invalid(format!(
            "matrix shape {:?} does not match observed grid {}x{}",
            phi.shape(),
            obs.n_rows(),
            obs.n_cols()
        ));
    }
    Ok(())
}
