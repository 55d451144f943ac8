//! Subspace and matrix diagnostics: principal angle, projection distance,
//! spikiness ratio and residual treatment energy.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::{orthonormal_basis, singular_values};
use crate::mf::NaturalParamMatrix;

/// Matrix with orthonormal columns. Zero columns are allowed (the trivial subspace).
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis(DMatrix<f64>);

impl SubspaceBasis {
    pub const ORTHONORMALITY_TOL: f64 = 1e-10;

    /// Wraps `m`, checking `m^T m = I` to within [`Self::ORTHONORMALITY_TOL`].
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let k = m.ncols();
        let gram = m.tr_mul(&m);
        let dev = (gram - DMatrix::identity(k, k)).amax();
        if dev > Self::ORTHONORMALITY_TOL {
            return invalid(format!("columns are not orthonormal (max deviation {dev:.3e})"));
        }
        Ok(Self(m))
    }

    /// Orthonormal basis for the column space of `m` (column-pivoted QR).
    pub fn orthonormalize(m: &DMatrix<f64>) -> Self {
        Self(orthonormal_basis(m, 1e-12))
    }

    pub fn empty(n: usize) -> Self {
        Self(DMatrix::zeros(n, 0))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

fn same_rows(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<()> {
    if a.n_rows() != b.n_rows() {
        return invalid(format!("bases have {} and {} rows", a.n_rows(), b.n_rows()));
    }
    Ok(())
}

/// `sqrt(1 - sigma_{min(r,k)}(M_hat^T M)^2)`, in `[0, 1]`.
pub fn principal_angle(m: &SubspaceBasis, m_hat: &SubspaceBasis) -> Result<f64> {
    same_rows(m, m_hat)?;
    if m.dim() == 0 || m_hat.dim() == 0 {
        return invalid("principal angle needs non-empty bases");
    }
    let cross = m_hat.matrix().tr_mul(m.matrix());
    let s = singular_values(&cross);
    let smallest = s[s.len() - 1].min(1.0);
    Ok((1.0 - smallest * smallest).max(0.0).sqrt())
}

/// Spectral norm of `M_hat M_hat^T - M M^T`.
///
/// Computed inside the span of both bases, which contains the range of the
/// difference, so no `N x N` matrix is formed.
pub fn projection_distance(m: &SubspaceBasis, m_hat: &SubspaceBasis) -> Result<f64> {
    same_rows(m, m_hat)?;
    let (a, b) = (m.matrix(), m_hat.matrix());
    let mut joined = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    joined.columns_mut(0, a.ncols()).copy_from(a);
    joined.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    let q = orthonormal_basis(&joined, 1e-12);
    if q.ncols() == 0 {
        return Ok(0.0);
    }
    let qa = q.tr_mul(a);
    let qb = q.tr_mul(b);
    let diff = &qb * qb.transpose() - &qa * qa.transpose();
    let eig = diff.symmetric_eigen();
    Ok(eig.eigenvalues.amax())
}

/// `||Phi||_max sqrt(N p) / ||Phi||_F`, in `[1, sqrt(N p)]`.
pub fn spikiness_ratio(phi: &NaturalParamMatrix) -> Result<f64> {
    let v = phi.values();
    let fro = v.norm();
    if fro == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let (n, p) = v.shape();
    Ok(v.amax() * ((n * p) as f64).sqrt() / fro)
}

/// `(1/N) T^T (I - P_U) T` for a treatment vector and an orthonormal basis.
pub fn residual_treatment_energy(t: &DVector<f64>, u_basis: &SubspaceBasis) -> Result<f64> {
    if t.len() != u_basis.n_rows() {
        return invalid(format!("treatment length {} vs basis rows {}", t.len(), u_basis.n_rows()));
    }
    if t.is_empty() {
        return invalid("empty treatment vector");
    }
    let total = t.norm_squared();
    let explained = (u_basis.matrix().tr_mul(t)).norm_squared();
    Ok(((total - explained) / t.len() as f64).clamp(0.0, total / t.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn basis(cols: &[&[f64]]) -> SubspaceBasis {
        let n = cols[0].len();
        let m = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        SubspaceBasis::orthonormalize(&m)
    }

    fn random_basis(n: usize, k: usize, seed: u64) -> SubspaceBasis {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::<f64>::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
        SubspaceBasis::orthonormalize(&m)
    }

    #[test]
    fn angle_examples() {
        let e1 = basis(&[&[1.0, 0.0, 0.0]]);
        let e2 = basis(&[&[0.0, 1.0, 0.0]]);
        let diag = basis(&[&[1.0, 1.0, 0.0]]);
        assert!(principal_angle(&e1, &e1).unwrap() < 1e-15);
        assert!((principal_angle(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        assert!((principal_angle(&e1, &diag).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn projection_distance_examples() {
        let e1 = basis(&[&[1.0, 0.0, 0.0]]);
        let e2 = basis(&[&[0.0, 1.0, 0.0]]);
        assert!(projection_distance(&e1, &e1).unwrap() < 1e-12);
        assert!((projection_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_distance_matches_dense_oracle() {
        for seed in 0..10 {
            let a = random_basis(12, 3, seed);
            let b = random_basis(12, 2, seed + 100);
            let dense = b.matrix() * b.matrix().transpose() - a.matrix() * a.matrix().transpose();
            let oracle = singular_values(&dense)[0];
            let got = projection_distance(&a, &b).unwrap();
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_invariant_to_rotation_and_symmetric() {
        let m = random_basis(20, 3, 1);
        let q = random_basis(3, 3, 2);
        let rotated = SubspaceBasis::new(m.matrix() * q.matrix()).unwrap();
        assert!(principal_angle(&m, &rotated).unwrap() < 1e-7);
        let other = random_basis(20, 3, 3);
        let ab = principal_angle(&m, &other).unwrap();
        let ba = principal_angle(&other, &m).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn unequal_dimensions_use_smaller_rank() {
        let m = basis(&[&[1.0, 0.0, 0.0, 0.0]]);
        let m_hat = basis(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        assert!(principal_angle(&m, &m_hat).unwrap() < 1e-15);
    }

    #[test]
    fn basis_rejects_non_orthonormal() {
        assert!(SubspaceBasis::new(DMatrix::from_row_slice(2, 1, &[1.0, 1.0])).is_err());
        assert!(SubspaceBasis::new(DMatrix::identity(3, 2)).is_ok());
    }

    #[test]
    fn spikiness_examples() {
        let ones = NaturalParamMatrix::new(DMatrix::from_element(4, 6, 1.0)).unwrap();
        assert!((spikiness_ratio(&ones).unwrap() - 1.0).abs() < 1e-12);
        let mut single = DMatrix::zeros(4, 6);
        single[(2, 3)] = -5.0;
        let single = NaturalParamMatrix::new(single).unwrap();
        assert!((spikiness_ratio(&single).unwrap() - 24f64.sqrt()).abs() < 1e-12);
        assert!(matches!(spikiness_ratio(&NaturalParamMatrix::zeros(2, 2)), Err(Error::ZeroMatrix)));
        let scaled = NaturalParamMatrix::new(single.values() * 3.5).unwrap();
        assert!((spikiness_ratio(&scaled).unwrap() - 24f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spikiness_matches_naive_evaluation() {
        // Rank-5 Gaussian-factor matrix; oracle recomputes max, Frobenius by loops.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u = DMatrix::<f64>::from_fn(200, 5, |_, _| StandardNormal.sample(&mut rng));
        let v = DMatrix::<f64>::from_fn(100, 5, |_, _| StandardNormal.sample(&mut rng));
        let phi = &u * v.transpose();
        let mut max = 0.0f64;
        let mut sq: f64 = 0.0;
        for i in 0..200 {
            for j in 0..100 {
                let mut s: f64 = 0.0;
                for l in 0..5 {
                    s += u[(i, l)] * v[(j, l)];
                }
                max = max.max(s.abs());
                sq += s * s;
            }
        }
        let oracle = max * (20000f64).sqrt() / sq.sqrt();
        let got = spikiness_ratio(&NaturalParamMatrix::new(phi).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle);
        assert!((1.0..=20000f64.sqrt()).contains(&got));
    }

    #[test]
    fn residual_energy_examples() {
        let b = random_basis(10, 2, 7);
        let t = b.matrix().column(0) * 2.0 - b.matrix().column(1);
        assert!(residual_treatment_energy(&t, &b).unwrap() < 1e-14);
        let t = DVector::from_fn(10, |i, _| (i % 2) as f64);
        let e = residual_treatment_energy(&t, &SubspaceBasis::empty(10)).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
        let e = residual_treatment_energy(&t, &b).unwrap();
        assert!((0.0..=0.5).contains(&e));
        assert!(residual_treatment_energy(&DVector::zeros(3), &b).is_err());
    }
}
