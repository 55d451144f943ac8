//! Replication engine for simulation studies.
//!
//! An experiment is a grid of `(N, p)` dimensions, missingness levels and
//! estimator pipelines. Every replication draws its data from a seed derived
//! from `(seed, N, p, replication)`, so all pipelines and missingness levels
//! in a replication see the same units, and the output does not depend on
//! thread count or scheduling.
//!
//! Pipelines are named `<prep>:<estimator>`. The prep step chooses the
//! adjustment covariates:
//!
//! | prep   | covariates                                                   |
//! |--------|--------------------------------------------------------------|
//! | `true` | the true confounders                                         |
//! | `raw`  | the observed proxies (fails when entries are missing)        |
//! | `mode` | proxies with missing cells filled by the column mode         |
//! | `mf`   | left singular vectors of the cross-validated completion      |
//!
//! and the estimator is one of `ols`, `ridge`, `lasso`, `ipw`, `dr`, `match`,
//! `psmatch`, `lr`. Shorthands: `oracle` = `true:ols`, `mf` = `mf:ols`, and
//! `ols`, `ridge`, `lasso` mean `raw:ols`, `raw:ridge`, `raw:lasso`.
//!
//! Each output row reports, over successful replications, the relative RMSE
//! `sqrt(mean((tau_hat - tau)^2)) / |tau|` and `band`, twice its delta-method
//! standard error: `band = sd(e^2) / (sqrt(R) sqrt(mean(e^2)) |tau|)` with
//! `e = tau_hat - tau` over `R` replications.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    doubly_robust_ate, ipw_ate, lasso_ate, logistic_outcome_ate, logistic_propensity, mahalanobis_match_ate,
    ols_ate, propensity_match_ate, ridge_ate, AteReport, CausalDataset, CovariateNoise, DEFAULT_CLIP,
};
use crate::ingest::{mode_impute, read_twins_csv};
use crate::mf::ObservedMatrix;
use crate::rng::{derive_seed, tag};
use crate::solver::{
    cross_validate, effective_rank, extract_confounders, fit_at_lambda, lambda_grid, lambda_max, CvOptions, SolverKind,
    SolverOptions,
};
use crate::synth::{
    default_linear_spec, gen_linear_scm, inject_mcar, synth_twins_standin, twins_semi_synth, TwinsOptions, TwinsRecord,
};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "CONFOUND_MF_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Gaussian proxies, `X_ij ~ N(U_i . V_j, noise_variance)`.
    LinearGaussian,
    /// Binary proxies, `X_ij = +-1` with `P(+1) = sigmoid(U_i . V_j)`.
    LinearBernoulli,
    /// Twins protocol on stand-in or user-supplied records.
    Twins,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::LinearGaussian => "linear_gaussian",
            Scenario::LinearBernoulli => "linear_bernoulli",
            Scenario::Twins => "twins",
        }
    }
}

/// Dimension schedule: the `(N, p)` pairs to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `N = p + 50`.
    HighDim { p: Vec<usize> },
    /// `N = 2 p`.
    LowDim { p: Vec<usize> },
    /// `N = round(p / 1.5)`.
    Wide { p: Vec<usize> },
    /// Fixed `p`, varying `N`.
    FixedP { p: usize, n: Vec<usize> },
    /// Fixed `N`, varying `p`.
    FixedN { n: usize, p: Vec<usize> },
    /// Explicit `[N, p]` pairs.
    Pairs { pairs: Vec<(usize, usize)> },
}

impl Schedule {
    pub fn dimensions(&self) -> Vec<(usize, usize)> {
        match self {
            Schedule::HighDim { p } => p.iter().map(|&p| (p + 50, p)).collect(),
            Schedule::LowDim { p } => p.iter().map(|&p| (2 * p, p)).collect(),
            Schedule::Wide { p } => p.iter().map(|&p| ((p as f64 / 1.5).round() as usize, p)).collect(),
            Schedule::FixedP { p, n } => n.iter().map(|&n| (n, *p)).collect(),
            Schedule::FixedN { n, p } => p.iter().map(|&p| (*n, p)).collect(),
            Schedule::Pairs { pairs } => pairs.clone(),
        }
    }
}

/// Matrix-factorization settings for the `mf` prep step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfOptions {
    pub cv: CvOptions,
    /// Number of grid values, log-spaced from `lambda_max * grid_max_ratio`
    /// down to `lambda_max * grid_min_ratio`.
    pub grid_size: usize,
    pub grid_min_ratio: f64,
    pub grid_max_ratio: f64,
    pub solver: SolverOptions,
}

impl Default for MfOptions {
    fn default() -> Self {
        Self {
            cv: CvOptions {
                folds: 5,
                solver: SolverKind::Convex,
                max_truncation_rank: Some(10),
                ..CvOptions::default()
            },
            grid_size: 6,
            grid_min_ratio: 0.05,
            grid_max_ratio: 0.5,
            solver: SolverOptions { rel_tol: 1e-4, ..SolverOptions::default() },
        }
    }
}

/// Twins scenario inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinsConfig {
    /// CSV of twin records; when absent, `N` stand-in pairs are generated per grid point.
    pub records: Option<PathBuf>,
    pub perturb_prob: f64,
}

impl Default for TwinsConfig {
    fn default() -> Self {
        Self { records: None, perturb_prob: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub schedule: Schedule,
    #[serde(default = "default_missing")]
    pub missing_probs: Vec<f64>,
    pub estimators: Vec<String>,
    /// Defaults to 50 for the linear scenarios and 20 for twins.
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Variance of the Gaussian proxy noise.
    #[serde(default = "default_noise_variance")]
    pub noise_variance: f64,
    #[serde(default = "default_outcome_sd")]
    pub outcome_noise_sd: f64,
    #[serde(default)]
    pub ridge_penalty: f64,
    #[serde(default)]
    pub lasso_penalty: f64,
    #[serde(default = "default_clip")]
    pub clip: (f64, f64),
    #[serde(default)]
    pub mf: MfOptions,
    #[serde(default)]
    pub twins: TwinsConfig,
}

fn default_missing() -> Vec<f64> {
    vec![0.0]
}

fn default_noise_variance() -> f64 {
    crate::estimators::DEFAULT_GAUSSIAN_NOISE_VARIANCE
}

fn default_outcome_sd() -> f64 {
    1.0
}

fn default_clip() -> (f64, f64) {
    DEFAULT_CLIP
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, schedule: Schedule, estimators: Vec<String>) -> Self {
        Self {
            scenario,
            schedule,
            missing_probs: default_missing(),
            estimators,
            replications: None,
            seed: 0,
            noise_variance: default_noise_variance(),
            outcome_noise_sd: default_outcome_sd(),
            ridge_penalty: 0.0,
            lasso_penalty: 0.0,
            clip: DEFAULT_CLIP,
            mf: MfOptions::default(),
            twins: TwinsConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies [`SEED_ENV`] when set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Parse(format!("{SEED_ENV}=`{v}` is not a u64")))?;
        }
        Ok(self)
    }

    pub fn replications(&self) -> usize {
        self.replications.unwrap_or(match self.scenario {
            Scenario::Twins => 20,
            _ => 50,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications() == 0 {
            return invalid("replications must be at least 1");
        }
        let dims = self.schedule.dimensions();
        if dims.is_empty() {
            return invalid("dimension schedule is empty");
        }
        if dims.iter().any(|&(n, p)| n == 0 || p == 0) {
            return invalid("dimensions must be positive");
        }
        if self.estimators.is_empty() {
            return invalid("estimator list is empty");
        }
        for name in &self.estimators {
            Pipeline::parse(name)?;
        }
        if self.missing_probs.is_empty() || self.missing_probs.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return invalid("missing_probs must be a non-empty list of values in [0, 1]");
        }
        if !(self.noise_variance >= 0.0 && self.outcome_noise_sd >= 0.0) {
            return invalid("noise levels must be non-negative");
        }
        if self.mf.grid_size == 0 || !(self.mf.grid_min_ratio > 0.0 && self.mf.grid_max_ratio >= self.mf.grid_min_ratio) {
            return invalid("MF grid needs at least one value and 0 < grid_min_ratio <= grid_max_ratio");
        }
        self.mf.solver.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prep {
    True,
    Raw,
    Mode,
    Mf,
}

impl Prep {
    pub fn name(&self) -> &'static str {
        match self {
            Prep::True => "true",
            Prep::Raw => "raw",
            Prep::Mode => "mode",
            Prep::Mf => "mf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Ols,
    Ridge,
    Lasso,
    Ipw,
    Dr,
    Match,
    PsMatch,
    Lr,
}

/// A parsed pipeline name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pipeline {
    pub prep: Prep,
    pub estimator: Estimator,
}

impl Pipeline {
    pub fn parse(name: &str) -> Result<Self> {
        let unknown = || Error::UnknownEstimator(name.to_string());
        let full = match name {
            "oracle" => "true:ols",
            "mf" => "mf:ols",
            "ols" => "raw:ols",
            "ridge" => "raw:ridge",
            "lasso" => "raw:lasso",
            other => other,
        };
        let (prep, est) = full.split_once(':').ok_or_else(unknown)?;
        let prep = match prep {
            "true" => Prep::True,
            "raw" => Prep::Raw,
            "mode" => Prep::Mode,
            "mf" => Prep::Mf,
            _ => return Err(unknown()),
        };
        let estimator = match est {
            "ols" => Estimator::Ols,
            "ridge" => Estimator::Ridge,
            "lasso" => Estimator::Lasso,
            "ipw" => Estimator::Ipw,
            "dr" => Estimator::Dr,
            "match" => Estimator::Match,
            "psmatch" => Estimator::PsMatch,
            "lr" => Estimator::Lr,
            _ => return Err(unknown()),
        };
        Ok(Self { prep, estimator })
    }
}

/// Inputs shared by every pipeline in one replication.
#[derive(Debug, Clone)]
pub struct PipelineInput {
    /// Treatment, outcome and (optionally) true confounders; its covariates are ignored.
    pub data: CausalDataset,
    /// Observed proxies.
    pub observed: ObservedMatrix,
}

/// Options that pipelines need beyond the data.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub mf: MfOptions,
    pub ridge_penalty: f64,
    pub lasso_penalty: f64,
    pub clip: (f64, f64),
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { mf: MfOptions::default(), ridge_penalty: 0.0, lasso_penalty: 0.0, clip: DEFAULT_CLIP }
    }
}

/// Adjustment covariates plus diagnostics from the prep step.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub covariates: DMatrix<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Cross-validated completion of `observed` and its estimated confounders.
///
/// With a truncation limit in `opts.cv`, the rank `r_hat` is chosen by
/// cross-validation together with `lambda`; otherwise it is the numerical rank
/// of the completed matrix.
pub fn mf_confounders(observed: &ObservedMatrix, opts: &MfOptions) -> Result<Prepared> {
    let top = lambda_max(observed)?;
    let ratio = opts.grid_min_ratio / opts.grid_max_ratio;
    let grid = lambda_grid(top * opts.grid_max_ratio, opts.grid_size, ratio);
    let cv = cross_validate(observed, &grid, &opts.cv, &opts.solver)?;
    let (lambda, fit, converged, wanted) = match &cv.rank_choice {
        Some(choice) if choice.lambda != cv.chosen_lambda => {
            let (fit, converged) = fit_at_lambda(observed, choice.lambda, opts.cv.solver, &opts.solver)?;
            (choice.lambda, fit, converged, choice.rank)
        }
        Some(choice) => (cv.chosen_lambda, cv.fit, cv.fit_converged, choice.rank),
        None => (cv.chosen_lambda, cv.fit, cv.fit_converged, cv.chosen_rank),
    };
    let available = effective_rank(&fit, opts.cv.rank_threshold);
    let r_hat = wanted.min(available).max(1);
    let conf = extract_confounders(&fit, r_hat)?;
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("mf_lambda".to_string(), lambda);
    diagnostics.insert("mf_rank".to_string(), r_hat as f64);
    diagnostics.insert("mf_converged".to_string(), f64::from(u8::from(converged)));
    Ok(Prepared { covariates: conf.basis, diagnostics })
}

/// Runs the prep step of a pipeline.
pub fn prepare(prep: Prep, input: &PipelineInput, opts: &PipelineOptions) -> Result<Prepared> {
    let covariates = match prep {
        Prep::True => input
            .data
            .true_confounders()
            .cloned()
            .ok_or_else(|| Error::InvalidInput("true confounders are not available".into()))?,
        Prep::Raw => {
            if !input.observed.is_complete() {
                return invalid("raw proxies have missing entries; use an imputing prep step");
            }
            input.observed.to_dense(0.0)
        }
        Prep::Mode => mode_impute(&input.observed)?,
        Prep::Mf => return mf_confounders(&input.observed, &opts.mf),
    };
    Ok(Prepared { covariates, diagnostics: BTreeMap::new() })
}

/// Applies an estimator to the data with the given adjustment covariates.
pub fn estimate(estimator: Estimator, data: &CausalDataset, opts: &PipelineOptions) -> Result<AteReport> {
    let z = data.covariates();
    let t = data.treatment();
    match estimator {
        Estimator::Ols => ols_ate(data),
        Estimator::Ridge => ridge_ate(data, opts.ridge_penalty),
        Estimator::Lasso => lasso_ate(data, opts.lasso_penalty),
        Estimator::Ipw => ipw_ate(data, &logistic_propensity(z, t)?, opts.clip),
        Estimator::Dr => doubly_robust_ate(data, &logistic_propensity(z, t)?),
        Estimator::Match => mahalanobis_match_ate(data),
        Estimator::PsMatch => propensity_match_ate(data, &logistic_propensity(z, t)?),
        Estimator::Lr => logistic_outcome_ate(data),
    }
}

fn finish(name: &str, prepared: &Prepared, mut report: AteReport) -> AteReport {
    report.method = name.to_string();
    for (k, v) in &prepared.diagnostics {
        report.diagnostics.insert(k.clone(), *v);
    }
    report
}

/// Runs pipeline `name` end to end. The report's `method` is `name`.
pub fn estimator_pipeline(name: &str, input: &PipelineInput, opts: &PipelineOptions) -> Result<AteReport> {
    let pipe = Pipeline::parse(name)?;
    let prepared = prepare(pipe.prep, input, opts)?;
    let data = input.data.with_covariates(prepared.covariates.clone())?;
    Ok(finish(name, &prepared, estimate(pipe.estimator, &data, opts)?))
}

/// Runs several pipelines on one replication, computing each prep step once.
pub fn run_pipelines(names: &[String], input: &PipelineInput, opts: &PipelineOptions) -> Vec<Result<AteReport>> {
    let mut cache: BTreeMap<Prep, std::result::Result<Prepared, String>> = BTreeMap::new();
    names
        .iter()
        .map(|name| {
            let pipe = Pipeline::parse(name)?;
            let prepared = cache
                .entry(pipe.prep)
                .or_insert_with(|| prepare(pipe.prep, input, opts).map_err(|e| e.to_string()))
                .clone()
                .map_err(|message| Error::Prep { prep: pipe.prep.name().to_string(), message })?;
            let data = input.data.with_covariates(prepared.covariates.clone())?;
            Ok(finish(name, &prepared, estimate(pipe.estimator, &data, opts)?))
        })
        .collect()
}

/// One aggregated row of the result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub n: usize,
    pub p: usize,
    pub missing_prob: f64,
    pub estimator: String,
    pub replications: usize,
    pub failures: usize,
    pub true_tau: f64,
    pub mean_tau_hat: f64,
    pub bias: f64,
    pub rmse: f64,
    pub rmse_rel: f64,
    pub band: f64,
    pub mean_abs_err: f64,
}

pub const CSV_HEADER: &str =
    "scenario,n,p,missing_prob,estimator,replications,failures,true_tau,mean_tau_hat,bias,rmse,rmse_rel,band,mean_abs_err";

impl ResultRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.n,
            self.p,
            self.missing_prob,
            self.estimator,
            self.replications,
            self.failures,
            self.true_tau,
            self.mean_tau_hat,
            self.bias,
            self.rmse,
            self.rmse_rel,
            self.band,
            self.mean_abs_err
        )
    }
}

/// Aggregated results plus the first error message per failing row.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub failure_messages: Vec<(usize, String)>,
}

impl ExperimentResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(128 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.csv_line());
        }
        out
    }

    pub fn row(&self, estimator: &str, n: usize, p: usize, missing_prob: f64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.n == n && r.p == p && r.missing_prob == missing_prob)
    }
}

/// Summary statistics of replication estimates against the true effect.
pub fn summarize(estimates: &[f64], tau: f64) -> (f64, f64, f64, f64, f64, f64) {
    let r = estimates.len();
    if r == 0 {
        return (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    }
    let rf = r as f64;
    let mean = estimates.iter().sum::<f64>() / rf;
    let sq: Vec<f64> = estimates.iter().map(|e| (e - tau).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / rf;
    let rmse = mse.sqrt();
    let rmse_rel = rmse / tau.abs();
    let band = if r > 1 && mse > 0.0 {
        let var = sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (rf - 1.0);
        (var / rf).sqrt() / (mse.sqrt() * tau.abs())
    } else {
        0.0
    };
    let mae = estimates.iter().map(|e| (e - tau).abs()).sum::<f64>() / rf;
    (mean, mean - tau, rmse, rmse_rel, band, mae)
}

struct Task {
    n: usize,
    p: usize,
    rep: usize,
}

/// Loads or generates the twin records for a grid point.
fn twins_records(cfg: &ExperimentConfig, n: usize) -> Result<Vec<TwinsRecord>> {
    match &cfg.twins.records {
        Some(path) => read_twins_csv(path),
        None => Ok(synth_twins_standin(n, cfg.seed)),
    }
}

/// Replication inputs for each missingness level, plus the true effect.
fn replication_inputs(
    cfg: &ExperimentConfig,
    task: &Task,
    records: Option<&[TwinsRecord]>,
) -> Result<(Vec<PipelineInput>, f64)> {
    let rep_seed = derive_seed(cfg.seed, &[tag::REPLICATION, task.n as u64, task.p as u64, task.rep as u64]);
    match cfg.scenario {
        Scenario::LinearGaussian | Scenario::LinearBernoulli => {
            let noise = if cfg.scenario == Scenario::LinearGaussian {
                CovariateNoise::Gaussian { sd: cfg.noise_variance.sqrt() }
            } else {
                CovariateNoise::Bernoulli
            };
            let mut spec = default_linear_spec(task.p, noise, cfg.seed)?;
            spec.outcome_noise_sd = cfg.outcome_noise_sd;
            let sample = gen_linear_scm(task.n, &spec, rep_seed)?;
            let mcar_seed = derive_seed(rep_seed, &[tag::MCAR]);
            let inputs = cfg
                .missing_probs
                .iter()
                .map(|&m| {
                    Ok(PipelineInput { data: sample.data.clone(), observed: inject_mcar(&sample.observed, m, mcar_seed)? })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((inputs, spec.tau))
        }
        Scenario::Twins => {
            let records = records.expect("twins records loaded");
            let mut tau = None;
            let inputs = cfg
                .missing_probs
                .iter()
                .map(|&m| {
                    let opts = TwinsOptions { p: task.p, perturb_prob: cfg.twins.perturb_prob, missing_prob: m };
                    let s = twins_semi_synth(records, &opts, rep_seed)?;
                    tau = s.data.sample_ate();
                    Ok(PipelineInput { data: s.data, observed: s.observed })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((inputs, tau.expect("twins data carry potential outcomes")))
        }
    }
}

type RepOutcome = Result<(f64, Vec<Vec<std::result::Result<f64, String>>>)>;

/// Runs the full grid on a pool of `jobs` threads.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment_inner(cfg))
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let dims = cfg.schedule.dimensions();
    let reps = cfg.replications();
    let mut records: BTreeMap<usize, Vec<TwinsRecord>> = BTreeMap::new();
    if cfg.scenario == Scenario::Twins {
        for &(n, _) in &dims {
            if let std::collections::btree_map::Entry::Vacant(slot) = records.entry(n) {
                slot.insert(twins_records(cfg, n)?);
            }
        }
    }
    let tasks: Vec<Task> =
        dims.iter().flat_map(|&(n, p)| (0..reps).map(move |rep| Task { n, p, rep })).collect();
    let opts = PipelineOptions {
        mf: cfg.mf.clone(),
        ridge_penalty: cfg.ridge_penalty,
        lasso_penalty: cfg.lasso_penalty,
        clip: cfg.clip,
    };
    let outcomes: Vec<RepOutcome> = tasks
        .par_iter()
        .map(|task| {
            let (inputs, tau) = replication_inputs(cfg, task, records.get(&task.n).map(Vec::as_slice))?;
            let per_missing = inputs
                .iter()
                .map(|input| {
                    let mut o = opts.clone();
                    o.mf.solver.seed = derive_seed(cfg.seed, &[tag::FOLDS, task.n as u64, task.p as u64, task.rep as u64]);
                    run_pipelines(&cfg.estimators, input, &o)
                        .into_iter()
                        .map(|r| r.map(|rep| rep.tau_hat).map_err(|e| e.to_string()))
                        .collect()
                })
                .collect();
            Ok((tau, per_missing))
        })
        .collect();

    let mut rows = Vec::new();
    let mut failure_messages = Vec::new();
    for (d, &(n, p)) in dims.iter().enumerate() {
        let block = &outcomes[d * reps..(d + 1) * reps];
        for (m, &missing_prob) in cfg.missing_probs.iter().enumerate() {
            for (e, name) in cfg.estimators.iter().enumerate() {
                let mut estimates = Vec::with_capacity(reps);
                let mut failures = 0;
                let mut first_error = None;
                let mut tau = f64::NAN;
                for outcome in block {
                    match outcome {
                        Ok((t, per)) => {
                            tau = *t;
                            match &per[m][e] {
                                Ok(v) => estimates.push(*v),
                                Err(msg) => {
                                    failures += 1;
                                    first_error.get_or_insert_with(|| msg.clone());
                                }
                            }
                        }
                        Err(err) => {
                            failures += 1;
                            first_error.get_or_insert_with(|| err.to_string());
                        }
                    }
                }
                let (mean, bias, rmse, rmse_rel, band, mae) = summarize(&estimates, tau);
                if let Some(msg) = first_error {
                    failure_messages.push((rows.len(), msg));
                }
                rows.push(ResultRow {
                    scenario: cfg.scenario.name().to_string(),
                    n,
                    p,
                    missing_prob,
                    estimator: name.clone(),
                    replications: estimates.len(),
                    failures,
                    true_tau: tau,
                    mean_tau_hat: mean,
                    bias,
                    rmse,
                    rmse_rel,
                    band,
                    mean_abs_err: mae,
                });
            }
        }
    }
    Ok(ExperimentResult { rows, failure_messages })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_names() {
        assert_eq!(Pipeline::parse("oracle").unwrap(), Pipeline { prep: Prep::True, estimator: Estimator::Ols });
        assert_eq!(Pipeline::parse("mf").unwrap(), Pipeline { prep: Prep::Mf, estimator: Estimator::Ols });
        assert_eq!(Pipeline::parse("mode:lr").unwrap(), Pipeline { prep: Prep::Mode, estimator: Estimator::Lr });
        assert!(matches!(Pipeline::parse("mice:lr"), Err(Error::UnknownEstimator(_))));
        assert!(matches!(Pipeline::parse("bogus"), Err(Error::UnknownEstimator(_))));
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::HighDim { p: vec![150, 250] }.dimensions(), vec![(200, 150), (300, 250)]);
        assert_eq!(Schedule::LowDim { p: vec![100] }.dimensions(), vec![(200, 100)]);
        assert_eq!(Schedule::Wide { p: vec![150] }.dimensions(), vec![(100, 150)]);
        assert_eq!(Schedule::FixedP { p: 50, n: vec![200, 800] }.dimensions(), vec![(200, 50), (800, 50)]);
    }

    #[test]
    fn summary_statistics() {
        let (mean, bias, rmse, rel, band, mae) = summarize(&[1.0, 3.0], 2.0);
        assert_eq!((mean, bias, rmse, rel, mae), (2.0, 0.0, 1.0, 0.5, 1.0));
        assert_eq!(band, 0.0);
        let (_, _, _, _, band, _) = summarize(&[2.0, 4.0, 2.5], 2.0);
        // Squared errors 0, 4, 0.25: mean 1.4167, sd 2.1183.
        let sq = [0.0f64, 4.0, 0.25];
        let m = sq.iter().sum::<f64>() / 3.0;
        let sd = (sq.iter().map(|s| (s - m).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((band - sd / 3f64.sqrt() / (m.sqrt() * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn config_json_and_defaults() {
        let text = r#"{
            "scenario": "linear_bernoulli",
            "schedule": {"kind": "high_dim", "p": [20]},
            "estimators": ["oracle", "ols", "mf"]
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.replications(), 50);
        assert_eq!(cfg.missing_probs, vec![0.0]);
        assert!(ExperimentConfig::from_json(r#"{"scenario":"twins","schedule":{"kind":"pairs","pairs":[]},"estimators":["mf"]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scenario":"twins","schedule":{"kind":"pairs","pairs":[[10,2]]},"estimators":["x:y"]}"#).is_err());
    }
}
