use nalgebra::{DMatrix, DVector};

use super::{AteReport, CausalDataset};
use crate::error::{invalid, Error, Result};
use crate::linalg::mean_and_covariance;

/// Relative pivot size below which the pooled covariance counts as singular.
const SINGULAR_TOL: f64 = 1e-12;

/// Metric used for nearest-neighbour matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchDistance {
    /// Mahalanobis distance under the pooled covariate covariance.
    Mahalanobis,
    /// Absolute difference of propensity scores.
    Propensity,
}

/// For each unit, the index of its nearest unit in the opposite arm under
/// Euclidean distance on `points` (rows). Ties go to the lowest index.
pub fn nearest_opposite(points: &DMatrix<f64>, treatment: &DVector<f64>) -> Vec<usize> {
    let n = points.nrows();
    let d = points.ncols();
    // Row-major copy for contiguous distance loops.
    let flat: Vec<f64> = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| points[(i, j)]).collect();
    let row = |i: usize| &flat[i * d..(i + 1) * d];
    (0..n)
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            let ri = row(i);
            for k in 0..n {
                if treatment[k] == treatment[i] {
                    continue;
                }
                let dist: f64 = ri.iter().zip(row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn matched_ate(data: &CausalDataset, points: &DMatrix<f64>, kind: MatchDistance) -> Result<AteReport> {
    data.require_both_arms()?;
    let matches = nearest_opposite(points, data.treatment());
    let (t, y) = (data.treatment(), data.outcome());
    let n = data.len();
    let total: f64 = (0..n)
        .map(|i| {
            let m = matches[i];
            if t[i] == 1.0 {
                y[i] - y[m]
            } else {
                y[m] - y[i]
            }
        })
        .sum();
    let mut used = vec![false; n];
    for &m in &matches {
        used[m] = true;
    }
    let method = match kind {
        MatchDistance::Mahalanobis => "match",
        MatchDistance::Propensity => "psmatch",
    };
    Ok(AteReport::new(method, total / n as f64, n)?
        .with("distinct_matches", used.iter().filter(|u| **u).count() as f64))
}

/// 1-nearest-neighbour matching with replacement on Mahalanobis distance,
/// averaged over all units (ATE).
pub fn mahalanobis_match_ate(data: &CausalDataset) -> Result<AteReport> {
    let x = data.covariates();
    let (mean, cov) = mean_and_covariance(x);
    let d = x.ncols();
    let whitened = if d == 0 {
        DMatrix::zeros(x.nrows(), 0)
    } else {
        let singular =
            || Error::Singular("pooled covariate covariance; drop collinear covariates or add a ridge term".into());
        let scale = cov.diagonal().amax();
        let chol = cov.clone().cholesky().ok_or_else(singular)?;
        let l_diag = chol.l_dirty().diagonal();
        if scale == 0.0 || l_diag.iter().any(|v| v * v <= SINGULAR_TOL * scale) {
            return Err(singular());
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        // Rows z_i = L^{-1}(x_i - mean), i.e. Z^T = L^{-1} X_c^T.
        let l = chol.l();
        let zt = l
            .solve_lower_triangular(&centered.transpose())
            .ok_or_else(|| Error::Singular("Cholesky factor".into()))?;
        zt.transpose()
    };
    matched_ate(data, &whitened, MatchDistance::Mahalanobis)
}

/// 1-nearest-neighbour matching with replacement on `|e_i - e_j|`.
pub fn propensity_match_ate(data: &CausalDataset, propensities: &DVector<f64>) -> Result<AteReport> {
    if propensities.len() != data.len() {
        return invalid("propensity vector has the wrong length");
    }
    let points = DMatrix::from_column_slice(data.len(), 1, propensities.as_slice());
    matched_ate(data, &points, MatchDistance::Propensity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn exact_twins() {
        let x = DMatrix::from_row_slice(6, 2, &[0.0, 1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 1.0, 2.0, 0.5, -1.0, 3.0]);
        let t = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![5.0, 7.0, 1.0, 4.0, 4.0, 2.0]);
        let data = CausalDataset::new(x, t, y).unwrap();
        let r = mahalanobis_match_ate(&data).unwrap();
        assert!((r.tau_hat - (1.0 + 3.0 - 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::<f64>::from_fn(12, 3, |_, _| StandardNormal.sample(&mut rng));
        let t = DVector::from_fn(12, |i, _| f64::from(i % 3 != 0));
        let (_, cov) = mean_and_covariance(&x);
        let inv = cov.clone().try_inverse().unwrap();
        let dist = |a: usize, b: usize| {
            let diff = (x.row(a) - x.row(b)).transpose();
            (diff.transpose() * &inv * diff)[(0, 0)]
        };
        let l = cov.cholesky().unwrap().l();
        let z = l.solve_lower_triangular(&x.transpose()).unwrap().transpose();
        let got = nearest_opposite(&z, &t);
        for i in 0..12 {
            let mut cands: Vec<usize> = (0..12).filter(|&k| t[k] != t[i]).collect();
            cands.sort_by(|&a, &b| dist(i, a).partial_cmp(&dist(i, b)).unwrap().then(a.cmp(&b)));
            assert_eq!(got[i], cands[0], "unit {i}");
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = DMatrix::from_column_slice(4, 1, &[0.5, 0.4, 0.6, 0.5]);
        let t = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(nearest_opposite(&p, &t)[0], 3);
        let p = DMatrix::from_column_slice(3, 1, &[0.5, 0.4, 0.6]);
        let t = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(nearest_opposite(&p, &t)[0], 1);
    }

    #[test]
    fn singular_covariance_errors() {
        let x = DMatrix::from_fn(5, 2, |i, _| i as f64);
        let t = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0]);
        let data = CausalDataset::new(x, t, DVector::zeros(5)).unwrap();
        assert!(matches!(mahalanobis_match_ate(&data), Err(Error::Singular(_))));
    }

    #[test]
    fn affine_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::<f64>::from_fn(80, 3, |_, _| StandardNormal.sample(&mut rng));
        let t = DVector::from_fn(80, |i, _| f64::from(x[(i, 0)] > 0.1));
        let y = DVector::from_fn(80, |i, _| x[(i, 1)] + t[i]);
        let data = CausalDataset::new(x.clone(), t, y).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, -1.0, 1.0, 0.5, 0.0, 0.2, 3.0]);
        let mut moved = &x * &a;
        for mut row in moved.row_iter_mut() {
            row[0] += 4.0;
            row[2] -= 1.0;
        }
        let a1 = mahalanobis_match_ate(&data).unwrap().tau_hat;
        let a2 = mahalanobis_match_ate(&data.with_covariates(moved).unwrap()).unwrap().tau_hat;
        assert!((a1 - a2).abs() < 1e-8);
    }
}
