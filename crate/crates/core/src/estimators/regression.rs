use nalgebra::{DMatrix, DVector};

use super::{covariate_names, AteReport, CausalDataset, RANK_TOL};
use crate::error::{invalid, Error, Result};
use crate::linalg::{least_squares, orthonormal_basis, spd_solve};

fn ols_design(data: &CausalDataset) -> (DMatrix<f64>, Vec<String>) {
    let x = data.covariates();
    let (n, d) = x.shape();
    let mut design = DMatrix::zeros(n, d + 2);
    design.column_mut(0).fill(1.0);
    design.column_mut(1).copy_from(data.treatment());
    design.columns_mut(2, d).copy_from(x);
    let mut names = vec!["intercept".to_string(), "treatment".to_string()];
    names.extend(covariate_names(d));
    (design, names)
}

/// Regression adjustment: the treatment coefficient of `Y ~ 1 + T + covariates`.
pub fn ols_ate(data: &CausalDataset) -> Result<AteReport> {
    data.require_both_arms()?;
    let (design, names) = ols_design(data);
    let coef = least_squares(&design, data.outcome(), &names, RANK_TOL)?;
    AteReport::new("ols", coef[1], data.len())
}

#[derive(Clone, Copy)]
enum Penalty {
    Ridge,
    Lasso,
}

/// Covariates standardized and with intercept and treatment partialled out.
struct Partialled {
    z: DMatrix<f64>,
    y: DVector<f64>,
    means: DVector<f64>,
    sds: DVector<f64>,
}

fn partial_out(data: &CausalDataset) -> Result<(Partialled, DMatrix<f64>)> {
    let x = data.covariates();
    let (n, d) = x.shape();
    let mut base = DMatrix::zeros(n, 2);
    base.column_mut(0).fill(1.0);
    base.column_mut(1).copy_from(data.treatment());
    let q = orthonormal_basis(&base, 1e-12);
    if q.ncols() < 2 {
        return Err(Error::RankDeficient { columns: vec!["intercept".into(), "treatment".into()] });
    }
    let mut means = DVector::zeros(d);
    let mut sds = DVector::zeros(d);
    let mut z = DMatrix::zeros(n, d);
    for j in 0..d {
        let col = x.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        means[j] = mean;
        sds[j] = sd;
        if sd > 0.0 {
            z.column_mut(j).copy_from(&col.map(|v| (v - mean) / sd));
        }
    }
    let z_res = &z - &q * q.tr_mul(&z);
    let y_res = data.outcome() - &q * q.tr_mul(data.outcome());
    Ok((Partialled { z: z_res, y: y_res, means, sds }, base))
}

/// Recovers the treatment coefficient given standardized covariate coefficients.
fn treatment_effect(data: &CausalDataset, base: &DMatrix<f64>, p: &Partialled, gamma: &DVector<f64>) -> Result<f64> {
    let x = data.covariates();
    let mut fitted = DVector::zeros(data.len());
    for j in 0..gamma.len() {
        if gamma[j] != 0.0 && p.sds[j] > 0.0 {
            let c = gamma[j] / p.sds[j];
            fitted += x.column(j).map(|v| (v - p.means[j]) * c);
        }
    }
    let names = vec!["intercept".to_string(), "treatment".to_string()];
    let coef = least_squares(base, &(data.outcome() - fitted), &names, RANK_TOL)?;
    Ok(coef[1])
}

fn penalized_ate(data: &CausalDataset, penalty: f64, kind: Penalty) -> Result<AteReport> {
    let method = match kind {
        Penalty::Ridge => "ridge",
        Penalty::Lasso => "lasso",
    };
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return invalid(format!("{method} penalty must be finite and non-negative, got {penalty}"));
    }
    data.require_both_arms()?;
    if penalty == 0.0 {
        let mut report = ols_ate(data)?;
        report.method = method.to_string();
        return Ok(report.with("penalty", 0.0));
    }
    let (part, base) = partial_out(data)?;
    let n = data.len() as f64;
    let (gamma, extra) = match kind {
        Penalty::Ridge => {
            let d = part.z.ncols();
            let gram = part.z.tr_mul(&part.z) / n + DMatrix::identity(d, d) * penalty;
            let rhs = part.z.tr_mul(&part.y) / n;
            let g = spd_solve(&gram, &DMatrix::from_column_slice(d, 1, rhs.as_slice()), "ridge system")?;
            (DVector::from_column_slice(g.as_slice()), None)
        }
        Penalty::Lasso => {
            let (g, sweeps) = lasso_coordinate_descent(&part.z, &part.y, penalty, 1e-8, 100_000);
            (g, Some(sweeps))
        }
    };
    let tau = treatment_effect(data, &base, &part, &gamma)?;
    let nonzero = gamma.iter().filter(|g| **g != 0.0).count() as f64;
    let mut report = AteReport::new(method, tau, data.len())?
        .with("penalty", penalty)
        .with("nonzero_coefficients", nonzero);
    if let Some(sweeps) = extra {
        report = report.with("sweeps", sweeps as f64);
    }
    Ok(report)
}

/// Cyclic coordinate descent for `(1/2n)||y - Z g||^2 + penalty ||g||_1`.
///
/// Stops when a full sweep changes no coefficient by more than `tol`.
pub(crate) fn lasso_coordinate_descent(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    penalty: f64,
    tol: f64,
    max_sweeps: usize,
) -> (DVector<f64>, usize) {
    let (n, d) = z.shape();
    let n = n as f64;
    let col_sq: Vec<f64> = (0..d).map(|j| z.column(j).norm_squared() / n).collect();
    let mut gamma = DVector::<f64>::zeros(d);
    let mut resid = y.clone();
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = z.column(j);
            let rho = col.dot(&resid) / n + col_sq[j] * gamma[j];
            let new = soft_threshold(rho, penalty) / col_sq[j];
            let delta = new - gamma[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                gamma[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change <= tol {
            break;
        }
    }
    (gamma, sweeps)
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Ridge regression adjustment on standardized covariates; intercept and
/// treatment are unpenalized. The penalty multiplies `||gamma||^2 / 2` against
/// a `1/(2n)`-scaled squared error.
pub fn ridge_ate(data: &CausalDataset, penalty: f64) -> Result<AteReport> {
    penalized_ate(data, penalty, Penalty::Ridge)
}

/// Lasso regression adjustment on standardized covariates; intercept and
/// treatment are unpenalized.
pub fn lasso_ate(data: &CausalDataset, penalty: f64) -> Result<AteReport> {
    penalized_ate(data, penalty, Penalty::Lasso)
}

/// Smallest lasso penalty at which every covariate coefficient is zero.
pub fn lasso_penalty_max(data: &CausalDataset) -> Result<f64> {
    let (part, _) = partial_out(data)?;
    let n = data.len() as f64;
    Ok(part.z.tr_mul(&part.y).amax() / n)
}

/// Confounder estimate with known loadings: `X V (V^T V)^{-1}`.
pub fn known_v_estimate(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != v.nrows() {
        return invalid(format!("X has {} columns but V has {} rows", x.ncols(), v.nrows()));
    }
    let gram = v.tr_mul(v);
    let xv = x * v;
    Ok(spd_solve(&gram, &xv.transpose(), "V^T V")?.transpose())
}
