use nalgebra::{DMatrix, DVector};

use super::{covariate_names, with_intercept, AteReport, CausalDataset, RANK_TOL};
use crate::error::{invalid, Error, Result};
use crate::linalg::{least_squares, sigmoid, softplus};

/// Default propensity clipping interval.
pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);

const GRAD_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 200;
/// Linear predictors beyond this magnitude on a perfectly classified sample
/// are treated as separation.
const SEPARATION_ETA: f64 = 25.0;

/// Maximum-likelihood logistic regression of a 0/1 label on `[1, covariates]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept first.
    pub coefficients: DVector<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl LogisticFit {
    pub fn linear_predictor(&self, covariates: &DMatrix<f64>) -> DVector<f64> {
        with_intercept(covariates) * &self.coefficients
    }

    pub fn predict(&self, covariates: &DMatrix<f64>) -> DVector<f64> {
        self.linear_predictor(covariates).map(sigmoid)
    }
}

fn log_likelihood(eta: &DVector<f64>, y: &DVector<f64>) -> f64 {
    eta.iter().zip(y.iter()).map(|(e, t)| t * e - softplus(*e)).sum()
}

/// Newton-Raphson with step halving until the mean score has norm below 1e-10.
///
/// Errors with [`Error::Separation`] when the labels are perfectly separable,
/// and with [`Error::RankDeficient`] when the design is collinear.
pub fn fit_logistic(covariates: &DMatrix<f64>, labels: &DVector<f64>) -> Result<LogisticFit> {
    let n = labels.len();
    if covariates.nrows() != n {
        return invalid("covariate and label lengths differ");
    }
    if let Some(v) = labels.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return invalid(format!("labels must be 0 or 1, got {v}"));
    }
    let positives = labels.sum();
    if positives == 0.0 || positives == n as f64 {
        return Err(Error::Separation { direction: vec![0.0; covariates.ncols() + 1] });
    }
    let design = with_intercept(covariates);
    let q = design.ncols();
    let mut names = vec!["intercept".to_string()];
    names.extend(covariate_names(q - 1));
    // Rank check only; the solution is discarded.
    least_squares(&design, labels, &names, RANK_TOL)?;

    let nf = n as f64;
    let mut beta = DVector::zeros(q);
    beta[0] = (positives / (nf - positives)).ln();
    let mut eta = &design * &beta;
    let mut ll = log_likelihood(&eta, labels);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_NEWTON {
        let probs = eta.map(sigmoid);
        let score = design.tr_mul(&(labels - &probs)) / nf;
        if score.norm() < GRAD_TOL {
            converged = true;
            break;
        }
        if separated(&eta, labels) {
            break;
        }
        iterations += 1;
        let w = probs.map(|p| (p * (1.0 - p)).max(1e-300));
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let info = design.tr_mul(&weighted) / nf;
        let Some(step) = info.cholesky().map(|c| c.solve(&score)) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_eta = &design * &cand;
            let cand_ll = log_likelihood(&cand_eta, labels);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if separated(&eta, labels) || (!converged && eta.amax() > SEPARATION_ETA) {
        let norm = beta.norm();
        let direction = if norm > 0.0 { (&beta / norm).iter().copied().collect() } else { vec![0.0; q] };
        return Err(Error::Separation { direction });
    }
    if !converged {
        let score = design.tr_mul(&(labels - eta.map(sigmoid))) / nf;
        if score.norm() >= GRAD_TOL {
            return Err(Error::Singular(format!(
                "logistic regression stalled with score norm {:.3e}",
                score.norm()
            )));
        }
    }
    Ok(LogisticFit { coefficients: beta, iterations, log_likelihood: ll })
}

/// Every unit strictly on its own side of the fitted hyperplane.
fn separated(eta: &DVector<f64>, labels: &DVector<f64>) -> bool {
    eta.iter().zip(labels.iter()).all(|(e, t)| if *t == 1.0 { *e > 0.0 } else { *e < 0.0 })
}

/// Estimated propensities `P(T = 1 | covariates)` from a logistic model.
pub fn logistic_propensity(covariates: &DMatrix<f64>, treatment: &DVector<f64>) -> Result<DVector<f64>> {
    let fit = fit_logistic(covariates, treatment).map_err(|e| match e {
        Error::Separation { direction } if direction.iter().all(|d| *d == 0.0) => {
            let arm = if treatment.sum() == 0.0 { 1 } else { 0 };
            Error::EmptyArm { arm }
        }
        other => other,
    })?;
    Ok(fit.predict(covariates))
}

fn clip_propensities(props: &DVector<f64>, clip: (f64, f64)) -> Result<(DVector<f64>, usize)> {
    let (lo, hi) = clip;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return invalid(format!("clip interval must satisfy 0 < low <= high < 1, got [{lo}, {hi}]"));
    }
    if let Some(p) = props.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return invalid(format!("propensity {p} outside [0, 1]"));
    }
    let clipped = props.iter().filter(|p| **p < lo || **p > hi).count();
    Ok((props.map(|p| p.clamp(lo, hi)), clipped))
}

/// Hajek inverse-propensity-weighted ATE with propensities clipped to `clip`.
pub fn ipw_ate(data: &CausalDataset, propensities: &DVector<f64>, clip: (f64, f64)) -> Result<AteReport> {
    if propensities.len() != data.len() {
        return invalid("propensity vector has the wrong length");
    }
    let (e, clipped) = clip_propensities(propensities, clip)?;
    let (t, y) = (data.treatment(), data.outcome());
    let (mut w1, mut s1, mut w0, mut s0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..data.len() {
        if t[i] == 1.0 {
            let w = 1.0 / e[i];
            w1 += w;
            s1 += w * y[i];
        } else {
            let w = 1.0 / (1.0 - e[i]);
            w0 += w;
            s0 += w * y[i];
        }
    }
    if w1 == 0.0 {
        return Err(Error::EmptyArm { arm: 1 });
    }
    if w0 == 0.0 {
        return Err(Error::EmptyArm { arm: 0 });
    }
    Ok(AteReport::new("ipw", s1 / w1 - s0 / w0, data.len())?
        .with("clipped", clipped as f64)
        .with("propensity_min", e.min())
        .with("propensity_max", e.max()))
}

/// Linear outcome model fitted on one arm, evaluated on every unit.
fn arm_predictions(data: &CausalDataset, arm: f64) -> Result<DVector<f64>> {
    let x = data.covariates();
    let d = x.ncols();
    let rows: Vec<usize> = (0..data.len()).filter(|&i| data.treatment()[i] == arm).collect();
    if rows.len() < d + 2 {
        return invalid(format!(
            "arm {} has {} units but the outcome model needs at least {}",
            arm as u8,
            rows.len(),
            d + 2
        ));
    }
    let design = with_intercept(&x.select_rows(&rows));
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.outcome()[i]));
    let mut names = vec!["intercept".to_string()];
    names.extend(covariate_names(d));
    let coef = least_squares(&design, &y, &names, RANK_TOL)?;
    Ok(with_intercept(x) * coef)
}

/// Augmented IPW: per-arm linear outcome models plus an inverse-propensity
/// correction of their residuals. Propensities are clipped to [`DEFAULT_CLIP`].
pub fn doubly_robust_ate(data: &CausalDataset, propensities: &DVector<f64>) -> Result<AteReport> {
    data.require_both_arms()?;
    if propensities.len() != data.len() {
        return invalid("propensity vector has the wrong length");
    }
    let (e, clipped) = clip_propensities(propensities, DEFAULT_CLIP)?;
    let mu1 = arm_predictions(data, 1.0)?;
    let mu0 = arm_predictions(data, 0.0)?;
    let (t, y) = (data.treatment(), data.outcome());
    let n = data.len();
    let total: f64 = (0..n)
        .map(|i| {
            let base = mu1[i] - mu0[i];
            if t[i] == 1.0 {
                base + (y[i] - mu1[i]) / e[i]
            } else {
                base - (y[i] - mu0[i]) / (1.0 - e[i])
            }
        })
        .sum();
    Ok(AteReport::new("dr", total / n as f64, n)?.with("clipped", clipped as f64))
}

/// Logistic outcome regression of a binary `Y` on `[1, T, covariates]`,
/// averaged over the sample with `T` set to 1 and to 0.
pub fn logistic_outcome_ate(data: &CausalDataset) -> Result<AteReport> {
    data.require_both_arms()?;
    let x = data.covariates();
    let (n, d) = x.shape();
    let mut design = DMatrix::zeros(n, d + 1);
    design.column_mut(0).copy_from(data.treatment());
    design.columns_mut(1, d).copy_from(x);
    let fit = fit_logistic(&design, data.outcome())?;
    let eta = fit.linear_predictor(&design);
    let gamma = fit.coefficients[1];
    let total: f64 = (0..n)
        .map(|i| {
            let base = eta[i] - gamma * data.treatment()[i];
            sigmoid(base + gamma) - sigmoid(base)
        })
        .sum();
    Ok(AteReport::new("lr", total / n as f64, n)?.with("treatment_log_odds", gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn intercept_only_gives_treated_fraction() {
        let t = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let e = logistic_propensity(&DMatrix::zeros(8, 0), &t).unwrap();
        for v in e.iter() {
            assert!((v - 3.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separation_is_reported() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let t = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        match fit_logistic(&x, &t) {
            Err(Error::Separation { direction }) => assert!(direction[1] > 0.0),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn duplicated_rows_give_same_propensities() {
        let mut r = rng(3);
        let x = DMatrix::<f64>::from_fn(60, 2, |_, _| StandardNormal.sample(&mut r));
        let t = DVector::from_fn(60, |i, _| f64::from(r.random::<f64>() < sigmoid(x[(i, 0)] - x[(i, 1)])));
        let e = logistic_propensity(&x, &t).unwrap();
        let x2 = DMatrix::from_fn(120, 2, |i, j| x[(i % 60, j)]);
        let t2 = DVector::from_fn(120, |i, _| t[i % 60]);
        let e2 = logistic_propensity(&x2, &t2).unwrap();
        for i in 0..60 {
            assert!((e[i] - e2[i]).abs() < 1e-9);
            assert!((e[i] - e2[i + 60]).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_logistic_coefficients() {
        // Standard errors from the inverse observed information at the truth.
        let beta = [0.3, 1.0, -0.5];
        let n = 20_000;
        let mut r = rng(11);
        let x = DMatrix::<f64>::from_fn(n, 2, |_, _| StandardNormal.sample(&mut r));
        let t = DVector::from_fn(n, |i, _| {
            f64::from(r.random::<f64>() < sigmoid(beta[0] + beta[1] * x[(i, 0)] + beta[2] * x[(i, 1)]))
        });
        let fit = fit_logistic(&x, &t).unwrap();
        let design = with_intercept(&x);
        let p = fit.predict(&x);
        let mut info = DMatrix::zeros(3, 3);
        for i in 0..n {
            let row = design.row(i);
            info += row.transpose() * row * (p[i] * (1.0 - p[i]));
        }
        let cov = info.try_inverse().unwrap();
        for j in 0..3 {
            let se = cov[(j, j)].sqrt();
            assert!((fit.coefficients[j] - beta[j]).abs() < 3.0 * se, "coef {j}");
        }
    }

    fn toy_dataset() -> CausalDataset {
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 2.0, 0.5, 1.5, 3.0]);
        let t = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 2.5, 2.0, 0.0, 1.0, 1.0]);
        CausalDataset::new(x, t, y).unwrap()
    }

    #[test]
    fn ipw_constant_propensity_is_difference_in_means() {
        let data = toy_dataset();
        let r = ipw_ate(&data, &DVector::from_element(6, 0.5), DEFAULT_CLIP).unwrap();
        assert!((r.tau_hat - (5.5 / 3.0 - 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(r.diagnostics["clipped"], 0.0);
        let r = ipw_ate(&data, &DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]), DEFAULT_CLIP).unwrap();
        assert!(r.tau_hat.is_finite());
        assert_eq!(r.diagnostics["clipped"], 6.0);
    }

    #[test]
    fn aipw_matches_hand_computation() {
        let data = toy_dataset();
        let e = DVector::from_vec(vec![0.6, 0.5, 0.7, 0.4, 0.3, 0.2]);
        // Treated arm: x = (0, 1, 2), y = (1, 2.5, 2): slope 1/2, intercept 4/3.
        // Control arm: x = (0.5, 1.5, 3), y = (0, 1, 1): Sxy = 7/6, Sxx = 19/6.
        let (s0, x0bar, y0bar) = (7.0 / 19.0, 5.0 / 3.0, 2.0 / 3.0);
        let mu1 = |x: f64| 4.0 / 3.0 + 0.5 * x;
        let mu0 = |x: f64| y0bar + s0 * (x - x0bar);
        let x = [0.0, 1.0, 2.0, 0.5, 1.5, 3.0];
        let y = [1.0, 2.5, 2.0, 0.0, 1.0, 1.0];
        let mut total = 0.0;
        for i in 0..6 {
            total += mu1(x[i]) - mu0(x[i]);
            if i < 3 {
                total += (y[i] - mu1(x[i])) / e[i];
            } else {
                total -= (y[i] - mu0(x[i])) / (1.0 - e[i]);
            }
        }
        let got = doubly_robust_ate(&data, &e).unwrap().tau_hat;
        assert!((got - total / 6.0).abs() < 1e-12);
    }

    #[test]
    fn aipw_exact_under_noiseless_linear_outcomes() {
        let mut r = rng(5);
        let x = DMatrix::<f64>::from_fn(40, 2, |_, _| StandardNormal.sample(&mut r));
        let t = DVector::from_fn(40, |i, _| (i % 3 == 0) as u8 as f64);
        let y = DVector::from_fn(40, |i, _| 2.0 * t[i] + x[(i, 0)] - 3.0 * x[(i, 1)]);
        let data = CausalDataset::new(x, t, y).unwrap();
        let got = doubly_robust_ate(&data, &DVector::from_element(40, 0.5)).unwrap().tau_hat;
        assert!((got - 2.0).abs() < 1e-8);
    }

    #[test]
    fn aipw_needs_enough_units_per_arm() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let t = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let data = CausalDataset::new(x, t, DVector::zeros(4)).unwrap();
        assert!(doubly_robust_ate(&data, &DVector::from_element(4, 0.5)).is_err());
    }

    #[test]
    fn logistic_outcome_without_covariates_is_difference_in_rates() {
        let t = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let data = CausalDataset::new(DMatrix::zeros(9, 0), t, y).unwrap();
        let got = logistic_outcome_ate(&data).unwrap().tau_hat;
        assert!((got - (0.25 - 0.4)).abs() < 1e-9, "{got}");
    }
}
