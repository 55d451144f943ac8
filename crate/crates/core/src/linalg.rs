//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Thin SVD with singular values sorted in decreasing order.
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn thin_svd(m: &DMatrix<f64>) -> ThinSvd {
    let (n, p) = m.shape();
    let k = n.min(p);
    if k == 0 {
        return ThinSvd { u: DMatrix::zeros(n, 0), singular_values: DVector::zeros(0), v_t: DMatrix::zeros(0, p) };
    }
    let svd = to_faer(m).thin_svd();
    match svd {
        Ok(svd) => {
            let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
            ThinSvd {
                u: DMatrix::from_fn(n, k, |i, j| u[(i, j)]),
                singular_values: DVector::from_fn(k, |i, _| s[i]),
                v_t: DMatrix::from_fn(k, p, |i, j| v[(j, i)]),
            }
        }
        Err(_) => {
            let svd = m.clone().svd(true, true);
            let mut out = ThinSvd {
                u: svd.u.expect("u requested"),
                singular_values: svd.singular_values,
                v_t: svd.v_t.expect("v_t requested"),
            };
            sort_svd(&mut out);
            out
        }
    }
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn sort_svd(svd: &mut ThinSvd) {
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    svd.u = DMatrix::from_fn(svd.u.nrows(), k, |i, j| svd.u[(i, order[j])]);
    svd.v_t = DMatrix::from_fn(k, svd.v_t.ncols(), |i, j| svd.v_t[(order[i], j)]);
    svd.singular_values = DVector::from_fn(k, |i, _| svd.singular_values[order[i]]);
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    match to_faer(m).singular_values() {
        Ok(s) => DVector::from_vec(s),
        Err(_) => {
            let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            DVector::from_vec(s)
        }
    }
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).sum()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

/// Flips column signs so that the first entry of each column whose magnitude is
/// non-negligible is positive.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let scale = col.amax();
        if scale == 0.0 {
            continue;
        }
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12 * scale).copied() {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Orthonormal basis for the column space of `m` via column-pivoted QR.
///
/// Columns whose pivot falls below `rel_tol * |R_00|` are treated as dependent
/// and dropped, so the result can have fewer columns than `m`.
pub fn orthonormal_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (n, k) = m.shape();
    if n == 0 || k == 0 {
        return DMatrix::zeros(n, 0);
    }
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let q = qr.q();
    let top = r[(0, 0)].abs();
    if top == 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let rank = (0..r.nrows().min(r.ncols()))
        .take_while(|&i| r[(i, i)].abs() > rel_tol * top)
        .count();
    q.columns(0, rank).into_owned()
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(chol.solve(b))
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(chol.inverse())
}

/// Least-squares fit with an explicit full-rank check.
///
/// The design is factored by Householder QR; the rank test uses the singular
/// values of `R`, which equal those of the design. A singular value below
/// `rank_tol * sigma_1` makes the fit fail with the names of the columns that
/// load on the offending null directions.
pub fn least_squares(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    names: &[String],
    rank_tol: f64,
) -> Result<DVector<f64>> {
    let (n, q) = design.shape();
    debug_assert_eq!(names.len(), q);
    if n < q {
        return Err(Error::RankDeficient { columns: names.to_vec() });
    }
    if q == 0 {
        return Ok(DVector::zeros(0));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let svd = r.clone().svd(false, true);
    let s = &svd.singular_values;
    let s_max = s.max();
    if s_max == 0.0 || s.min() <= rank_tol * s_max {
        let v_t = svd.v_t.expect("v_t requested");
        let mut flagged = vec![false; q];
        for (idx, &sv) in s.iter().enumerate() {
            if sv <= rank_tol * s_max {
                let row = v_t.row(idx);
                let peak = row.amax();
                for j in 0..q {
                    if row[j].abs() > 1e-3 * peak {
                        flagged[j] = true;
                    }
                }
            }
        }
        let columns = names
            .iter()
            .zip(flagged)
            .filter_map(|(name, f)| f.then(|| name.clone()))
            .collect();
        return Err(Error::RankDeficient { columns });
    }
    let mut rhs = y.clone();
    qr.q_tr_mul(&mut rhs);
    let rhs = rhs.rows(0, q).into_owned();
    r.solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Singular("triangular factor".into()))
}

/// Column means and the (population, divide-by-n) covariance matrix.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / n;
    (mean, cov)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_svd_reconstructs_and_sorts() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let svd = thin_svd(&m);
        let s = &svd.singular_values;
        assert!(s[0] >= s[1]);
        let rec = &svd.u * DMatrix::from_diagonal(s) * &svd.v_t;
        assert!((rec - m).norm() < 1e-12);
    }

    #[test]
    fn thin_svd_agrees_with_nalgebra_on_tall_and_wide() {
        for (n, p) in [(9, 4), (4, 9), (6, 6)] {
            let m = DMatrix::from_fn(n, p, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * (i * j) as f64);
            let svd = thin_svd(&m);
            assert_eq!(svd.u.shape(), (n, n.min(p)));
            assert_eq!(svd.v_t.shape(), (n.min(p), p));
            let rec = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * &svd.v_t;
            assert!((rec - &m).amax() < 1e-10);
            let mut reference: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
            reference.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in singular_values(&m).iter().zip(&reference) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn orthonormal_basis_drops_dependent_columns() {
        let m = DMatrix::from_row_slice(4, 3, &[
            1.0, 2.0, 0.0, //
            0.0, 0.0, 1.0, //
            1.0, 2.0, 0.0, //
            0.0, 0.0, 1.0,
        ]);
        let q = orthonormal_basis(&m, 1e-10);
        assert_eq!(q.ncols(), 2);
        assert!((q.tr_mul(&q) - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn least_squares_names_collinear_columns() {
        let x = DMatrix::from_fn(10, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64,
        });
        let y = DVector::from_fn(10, |i, _| i as f64);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        match least_squares(&x, &y, &names, 1e-10) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["b", "c"]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }
}
