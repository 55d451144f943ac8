use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{CovariateNoise, GenerativeSpec};
use crate::error::{invalid, Result};
use crate::linalg::{sigmoid, spd_inverse};
use crate::rng::{rng_for, tag};

/// Population moments of treatment and confounders entering the bias formula.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentMoments {
    /// `E[T U]`, length `r`.
    pub t_u: DVector<f64>,
    /// `E[U U^T]`, `r x r`.
    pub u_u: DMatrix<f64>,
    /// `E[T^2]`, or `Var(T)` for centered moments.
    pub t_t: f64,
}

/// Monte Carlo moments with standard errors for `t_u` and `t_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub moments: TreatmentMoments,
    pub t_u_se: DVector<f64>,
    pub t_t_se: f64,
}

/// Asymptotic bias of the OLS estimate of `tau` when regressing `Y` on `T`
/// and covariates from the additive model `X = U V^T + W`:
///
/// ```text
///   m S^{-1} (G + S^{-1})^{-1} alpha
///   --------------------------------      G = V^T V / sigma_w^2,  S = E[U U^T],
///     t_t - m (G^{-1} + S)^{-1} m^T        m = E[T U],  t_t = E[T^2].
/// ```
///
/// With an intercept in the regression, pass centered moments
/// (`t_t = Var(T)`, `t_u = Cov(T, U)`).
pub fn bias_oracle(spec: &GenerativeSpec, moments: &TreatmentMoments) -> Result<f64> {
    let sd = match spec.noise {
        CovariateNoise::Gaussian { sd } if sd > 0.0 => sd,
        _ => return invalid("bias formula needs additive Gaussian noise with positive sd"),
    };
    let r = spec.r();
    if moments.t_u.len() != r || moments.u_u.shape() != (r, r) {
        return invalid("moment dimensions do not match the confounder dimension");
    }
    let alpha = DVector::from_column_slice(&spec.alpha);
    let g = spec.loadings.tr_mul(&spec.loadings) / (sd * sd);
    let s_inv = spd_inverse(&moments.u_u, "E[U U^T]")?;
    let g_inv = spd_inverse(&g, "V^T V")?;
    let m = &moments.t_u;
    let inner = spd_inverse(&(&g + &s_inv), "V^T V / sigma_w^2 + E[U U^T]^{-1}")?;
    let numerator = m.dot(&(&s_inv * (&inner * &alpha)));
    let outer = spd_inverse(&(&g_inv + &moments.u_u), "(V^T V)^{-1} sigma_w^2 + E[U U^T]")?;
    let denominator = moments.t_t - m.dot(&(&outer * m));
    if !(denominator > 0.0) {
        return invalid(format!("bias denominator {denominator} is not positive"));
    }
    Ok(numerator / denominator)
}

/// Monte Carlo moments of `(T, U)` for `U ~ N(0, I_r)` and
/// `T | U ~ Bernoulli(sigmoid(beta . U))`, using `E[T | U]` in place of `T`
/// where that lowers variance without changing the expectation.
pub fn simulate_moments(beta: &[f64], draws: usize, seed: u64, centered: bool) -> Result<MomentEstimate> {
    let r = beta.len();
    if r == 0 || draws < 2 {
        return invalid("need at least one confounder and two draws");
    }
    let mut rng = rng_for(seed, &[tag::MOMENTS, r as u64]);
    let mut u = vec![0.0; r];
    let mut sum_t = 0.0;
    let mut sum_tt = 0.0;
    let mut sum_tu = DVector::<f64>::zeros(r);
    let mut sum_tu_sq = DVector::<f64>::zeros(r);
    let mut sum_uu = DMatrix::zeros(r, r);
    for _ in 0..draws {
        let mut eta = 0.0;
        for (uj, bj) in u.iter_mut().zip(beta) {
            *uj = rng.sample::<f64, _>(StandardNormal);
            eta += *uj * bj;
        }
        let e = sigmoid(eta);
        sum_t += e;
        sum_tt += e * e;
        for j in 0..r {
            let v = e * u[j];
            sum_tu[j] += v;
            sum_tu_sq[j] += v * v;
            for k in 0..r {
                sum_uu[(j, k)] += u[j] * u[k];
            }
        }
    }
    let nf = draws as f64;
    let mean_t = sum_t / nf;
    let var_e = (sum_tt / nf - mean_t * mean_t).max(0.0);
    let t_u = &sum_tu / nf;
    let t_u_se = DVector::from_fn(r, |j, _| ((sum_tu_sq[j] / nf - t_u[j] * t_u[j]).max(0.0) / nf).sqrt());
    let u_u = &sum_uu / nf;
    let (t_t, t_t_se) = if centered {
        // d Var / d mean = 1 - 2 mean.
        (mean_t * (1.0 - mean_t), (1.0 - 2.0 * mean_t).abs() * (var_e / nf).sqrt())
    } else {
        (mean_t, (var_e / nf).sqrt())
    };
    Ok(MomentEstimate { moments: TreatmentMoments { t_u, u_u, t_t }, t_u_se, t_t_se })
}

/// The same moments by one-dimensional quadrature.
///
/// For `U ~ N(0, I)`, Stein's identity gives `E[sigmoid(beta . U) U] =
/// beta E[sigmoid'(|beta| Z)]`, and `E[T] = E[sigmoid(|beta| Z)]`; both are
/// integrals against the standard normal density, evaluated by composite
/// Simpson's rule on `[-12, 12]`.
pub fn logistic_gaussian_moments(beta: &[f64], centered: bool) -> Result<TreatmentMoments> {
    let r = beta.len();
    if r == 0 {
        return invalid("need at least one confounder");
    }
    let b = beta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean_t = gaussian_expectation(|z| sigmoid(b * z));
    let slope = gaussian_expectation(|z| {
        let s = sigmoid(b * z);
        s * (1.0 - s)
    });
    let t_u = DVector::from_iterator(r, beta.iter().map(|bj| bj * slope));
    let t_t = if centered { mean_t * (1.0 - mean_t) } else { mean_t };
    Ok(TreatmentMoments { t_u, u_u: DMatrix::identity(r, r), t_t })
}

fn gaussian_expectation(f: impl Fn(f64) -> f64) -> f64 {
    const HALF_WIDTH: f64 = 12.0;
    const INTERVALS: usize = 4000;
    let h = 2.0 * HALF_WIDTH / INTERVALS as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let g = |z: f64| f(z) * norm * (-0.5 * z * z).exp();
    let mut acc = g(-HALF_WIDTH) + g(HALF_WIDTH);
    for i in 1..INTERVALS {
        let z = -HALF_WIDTH + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 * g(z) } else { 2.0 * g(z) };
    }
    acc * h / 3.0
}
