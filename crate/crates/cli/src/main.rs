use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use confound_mf::diagnostics::{
    principal_angle, projection_distance, residual_treatment_energy, spikiness_ratio, SubspaceBasis,
};
use confound_mf::estimators::{
    doubly_robust_ate, ipw_ate, lasso_ate, logistic_outcome_ate, logistic_propensity, mahalanobis_match_ate,
    ols_ate, propensity_match_ate, ridge_ate, AteReport, CovariateNoise,
    DEFAULT_GAUSSIAN_NOISE_VARIANCE,
};
use confound_mf::harness::{run_experiment, ExperimentConfig};
use confound_mf::ingest::{
    infer_losses, read_csv_matrix, read_dataset_csv, read_dense_csv, write_csv_matrix,
    write_dataset_csv, write_dense_csv, write_twins_csv, Schema,
};
use confound_mf::mf::default_col_names;
use confound_mf::solver::{
    cross_validate, default_lambda_grid, effective_rank, extract_confounders, fit_at_lambda, solve_convex, solve_nonconvex,
    CvOptions, SolverKind, SolverOptions, DEFAULT_RANK_THRESHOLD,
};
use confound_mf::synth::{default_linear_spec, gen_linear_scm, synth_twins_standin};
use confound_mf::{Error, LossKind, NaturalParamMatrix, ObservedMatrix};

const EXIT_FAILURE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "confound-mf", version, about = "Latent confounder recovery and treatment effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete a partially observed matrix and extract confounders.
    Complete(CompleteArgs),
    /// Compare an estimated confounder basis with the true one.
    Diagnose(DiagnoseArgs),
    /// Estimate an average treatment effect.
    Ate(AteArgs),
    /// Generate synthetic data.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Run a Monte Carlo experiment grid.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Auto,
    Gaussian,
    Bernoulli,
    Poisson,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Convex,
    Factored,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    input: PathBuf,
    /// JSON object mapping column names to loss kinds; overrides `--loss`.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    loss: LossArg,
    #[arg(long, conflicts_with = "cv", required_unless_present = "cv")]
    lambda: Option<f64>,
    /// Choose lambda by cross-validation over a log grid below lambda_max.
    #[arg(long)]
    cv: bool,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 10)]
    grid_size: usize,
    #[arg(long, default_value_t = DEFAULT_RANK_THRESHOLD)]
    rank_threshold: f64,
    /// Also choose the confounder rank by cross-validating truncations up to this rank.
    #[arg(long, requires = "cv")]
    max_truncation_rank: Option<usize>,
    #[arg(long, env = "CONFOUND_MF_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "convex")]
    solver: SolverArg,
    /// Factor width for the factored solver.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = SolverOptions::default().max_iters)]
    max_iters: usize,
    #[arg(long, default_value_t = SolverOptions::default().rel_tol)]
    rel_tol: f64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    confounders: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    u_true: PathBuf,
    #[arg(long)]
    u_hat: PathBuf,
    #[arg(long)]
    phi: Option<PathBuf>,
    /// Dataset CSV whose `treatment` column gives the residual treatment energy.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ols,
    Ridge,
    Lasso,
    Ipw,
    Dr,
    Match,
    Psmatch,
    Lr,
}

#[derive(Args)]
struct AteArgs {
    /// CSV with `treatment` and `outcome` columns.
    #[arg(long)]
    data: PathBuf,
    /// Adjustment covariates, one row per unit; omit for none.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, default_value_t = 0.0)]
    penalty: f64,
    #[arg(long, value_parser = parse_clip, default_value = "0.01,0.99")]
    clip: (f64, f64),
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Bernoulli,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Linear structural model with five Gaussian confounders.
    Linear(SynthLinearArgs),
    /// Stand-in twin records with the twins column layout.
    TwinsStandin(SynthTwinsArgs),
}

#[derive(Args)]
struct SynthLinearArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    #[arg(long, default_value_t = DEFAULT_GAUSSIAN_NOISE_VARIANCE)]
    noise_variance: f64,
    #[arg(long, env = "CONFOUND_MF_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthTwinsArgs {
    #[arg(long)]
    pairs: usize,
    #[arg(long, env = "CONFOUND_MF_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_clip(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err("clip bounds must satisfy 0 < lo < hi < 1".into());
    }
    Ok((lo, hi))
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> confound_mf::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CompleteSummary {
    lambda: f64,
    rank: usize,
    converged: bool,
    iterations: Option<usize>,
    objective: Option<f64>,
    cv_heldout_mean: Option<Vec<f64>>,
    lambda_grid: Option<Vec<f64>>,
}

fn load_matrix(args: &CompleteArgs) -> confound_mf::Result<ObservedMatrix> {
    if let Some(path) = &args.schema {
        return read_csv_matrix(&args.input, &Schema::read(path)?);
    }
    let uniform = match args.loss {
        LossArg::Auto => LossKind::UNIT_GAUSSIAN,
        LossArg::Gaussian => LossKind::UNIT_GAUSSIAN,
        LossArg::Bernoulli => LossKind::Bernoulli,
        LossArg::Poisson => LossKind::Poisson,
    };
    let obs = read_csv_matrix(&args.input, &Schema::Uniform(uniform))?;
    match args.loss {
        LossArg::Auto => infer_losses(&obs),
        _ => Ok(obs),
    }
}

fn complete(args: CompleteArgs) -> confound_mf::Result<()> {
    let obs = load_matrix(&args)?;
    let opts = SolverOptions { max_iters: args.max_iters, rel_tol: args.rel_tol, seed: args.seed, ..SolverOptions::default() };
    let kind = match args.solver {
        SolverArg::Convex => SolverKind::Convex,
        SolverArg::Factored => SolverKind::Factored { k: args.k },
    };
    let (phi, summary) = if args.cv {
        let grid = default_lambda_grid(&obs)?;
        let grid = if args.grid_size == grid.len() {
            grid
        } else {
            confound_mf::solver::lambda_grid(grid[0], args.grid_size, grid[grid.len() - 1] / grid[0])
        };
        let cv = CvOptions {
            folds: args.folds,
            solver: kind,
            rank_threshold: args.rank_threshold,
            max_truncation_rank: args.max_truncation_rank,
        };
        let res = cross_validate(&obs, &grid, &cv, &opts)?;
        for flag in &res.fold_flags {
            eprintln!(
                "warning: fold {} leaves {} rows and {} columns unobserved in training",
                flag.fold, flag.empty_rows, flag.empty_cols
            );
        }
        let (lambda, fit, converged, rank) = match &res.rank_choice {
            Some(choice) if choice.lambda != res.chosen_lambda => {
                let (fit, converged) = fit_at_lambda(&obs, choice.lambda, kind, &opts)?;
                let rank = choice.rank.min(effective_rank(&fit, args.rank_threshold));
                (choice.lambda, fit, converged, rank)
            }
            Some(choice) => {
                (res.chosen_lambda, res.fit.clone(), res.fit_converged, choice.rank.min(res.chosen_rank))
            }
            None => (res.chosen_lambda, res.fit.clone(), res.fit_converged, res.chosen_rank),
        };
        let summary = CompleteSummary {
            lambda,
            rank,
            converged,
            iterations: None,
            objective: None,
            cv_heldout_mean: Some(res.heldout_mean.clone()),
            lambda_grid: Some(res.lambda_grid.clone()),
        };
        (fit, summary)
    } else {
        let lambda = args.lambda.expect("clap requires --lambda without --cv");
        let (phi, converged, iterations, objective) = match kind {
            SolverKind::Convex => {
                let fit = solve_convex(&obs, lambda, &opts)?;
                let obj = fit.objective();
                (fit.phi, fit.converged, fit.iterations, obj)
            }
            SolverKind::Factored { k } => {
                let fit = solve_nonconvex(&obs, k.min(obs.n_rows().min(obs.n_cols())), lambda, &opts)?;
                let obj = fit.objective();
                (fit.factors.product()?, fit.converged, fit.iterations, obj)
            }
        };
        let rank = effective_rank(&phi, args.rank_threshold);
        let summary = CompleteSummary {
            lambda,
            rank,
            converged,
            iterations: Some(iterations),
            objective: Some(objective),
            cv_heldout_mean: None,
            lambda_grid: None,
        };
        (phi, summary)
    };
    if !summary.converged {
        eprintln!("warning: solver stopped at max_iters={} before reaching rel_tol", args.max_iters);
    }
    write_dense_csv(&args.output, obs.col_names(), phi.values())?;
    if let Some(path) = &args.confounders {
        if summary.rank == 0 {
            eprintln!("warning: completed matrix is zero; no confounders written");
        } else {
            let conf = extract_confounders(&phi, summary.rank)?;
            write_dense_csv(path, &prefixed("u", conf.basis.ncols()), &conf.basis)?;
        }
    }
    write_json(None, &summary)
}

fn prefixed(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("{prefix}{j}")).collect()
}

#[derive(Serialize)]
struct DiagnoseReport {
    angle: f64,
    projection_distance: f64,
    spikiness: Option<f64>,
    residual_energy: Option<f64>,
}

fn diagnose(args: DiagnoseArgs) -> confound_mf::Result<()> {
    let (_, u_true) = read_dense_csv(&args.u_true)?;
    let (_, u_hat) = read_dense_csv(&args.u_hat)?;
    let m = SubspaceBasis::orthonormalize(&u_true);
    let m_hat = SubspaceBasis::orthonormalize(&u_hat);
    let spikiness = match &args.phi {
        Some(path) => Some(spikiness_ratio(&NaturalParamMatrix::new(read_dense_csv(path)?.1)?)?),
        None => None,
    };
    let residual_energy = match &args.data {
        Some(path) => {
            let data = read_dataset_csv(path, DMatrix::zeros(u_hat.nrows(), 0))?;
            Some(residual_treatment_energy(data.treatment(), &m_hat)?)
        }
        None => None,
    };
    let report = DiagnoseReport {
        angle: principal_angle(&m, &m_hat)?,
        projection_distance: projection_distance(&m, &m_hat)?,
        spikiness,
        residual_energy,
    };
    write_json(args.output.as_deref(), &report)
}

fn ate(args: AteArgs) -> confound_mf::Result<()> {
    let covariates = match &args.covariates {
        Some(path) => read_dense_csv(path)?.1,
        None => {
            let (_, m) = read_dense_csv(&args.data)?;
            DMatrix::zeros(m.nrows(), 0)
        }
    };
    let data = read_dataset_csv(&args.data, covariates)?;
    let (z, t) = (data.covariates(), data.treatment());
    let report: AteReport = match args.method {
        MethodArg::Ols => ols_ate(&data)?,
        MethodArg::Ridge => ridge_ate(&data, args.penalty)?,
        MethodArg::Lasso => lasso_ate(&data, args.penalty)?,
        MethodArg::Ipw => ipw_ate(&data, &logistic_propensity(z, t)?, args.clip)?,
        MethodArg::Dr => doubly_robust_ate(&data, &logistic_propensity(z, t)?)?,
        MethodArg::Match => mahalanobis_match_ate(&data)?,
        MethodArg::Psmatch => propensity_match_ate(&data, &logistic_propensity(z, t)?)?,
        MethodArg::Lr => logistic_outcome_ate(&data)?,
    };
    write_json(args.output.as_deref(), &report)
}

fn synth_linear(args: SynthLinearArgs) -> confound_mf::Result<()> {
    let noise = match args.noise {
        NoiseArg::Gaussian => {
            if !(args.noise_variance >= 0.0) {
                return Err(Error::InvalidInput("noise variance must be non-negative".into()));
            }
            CovariateNoise::Gaussian { sd: args.noise_variance.sqrt() }
        }
        NoiseArg::Bernoulli => CovariateNoise::Bernoulli,
    };
    let spec = default_linear_spec(args.p, noise, args.seed)?;
    let sample = gen_linear_scm(args.n, &spec, args.seed)?;
    fs::create_dir_all(&args.out_dir)?;
    let dir = &args.out_dir;
    write_csv_matrix(dir.join("X.csv"), &sample.observed)?;
    fs::write(dir.join("schema.json"), Schema::for_matrix(&sample.observed) + "\n")?;
    write_dataset_csv(dir.join("data.csv"), &sample.data)?;
    let u = sample.data.true_confounders().expect("generated samples carry confounders");
    write_dense_csv(dir.join("U.csv"), &prefixed("u", u.ncols()), u)?;
    write_dense_csv(dir.join("V.csv"), &default_col_names(sample.loadings.ncols()), &sample.loadings)?;
    Ok(())
}

fn synth_twins(args: SynthTwinsArgs) -> confound_mf::Result<()> {
    write_twins_csv(&args.out, &synth_twins_standin(args.pairs, args.seed))
}

fn experiment(args: ExperimentArgs) -> confound_mf::Result<()> {
    let cfg = ExperimentConfig::from_json(&fs::read_to_string(&args.config)?)?.with_env_overrides()?;
    let result = run_experiment(&cfg, args.jobs)?;
    for (row, msg) in &result.failure_messages {
        eprintln!("warning: row {row}: {msg}");
    }
    fs::write(&args.out, result.to_csv())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Complete(a) => complete(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Ate(a) => ate(a),
        Command::Synth(SynthCommand::Linear(a)) => synth_linear(a),
        Command::Synth(SynthCommand::TwinsStandin(a)) => synth_twins(a),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(EXIT_DIVERGED),
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use confound_mf::estimators::DEFAULT_CLIP;

    #[test]
    fn clip_parsing() {
        assert_eq!(parse_clip("0.01,0.99").unwrap(), DEFAULT_CLIP);
        assert!(parse_clip("0.5").is_err());
        assert!(parse_clip("0.9,0.1").is_err());
        assert!(parse_clip("0,1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
