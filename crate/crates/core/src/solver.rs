//! Exponential-family matrix completion solvers.
//!
//! Two formulations are provided:
//!
//! * the convex nuclear-norm problem
//!   `min_Phi (N p / |Omega|) sum_Omega loss(X_ij, Phi_ij) + lambda ||Phi||_*`,
//!   solved by monotone proximal gradient with backtracking, using singular
//!   value thresholding as the prox;
//! * the factored problem
//!   `min_{U, V} (N p / |Omega|) sum_Omega loss(X_ij, U_i . V_j) + lambda/2 (||U||_F^2 + ||V||_F^2)`,
//!   solved by alternating damped Newton over the rows of `U` and `V`.
//!
//! The two share the same data-term scaling, so for `k` at least the rank of the
//! convex solution they have the same optimal value at the same `lambda`
//! (`||Phi||_* = min over Phi = U V^T of (||U||_F^2 + ||V||_F^2) / 2`).

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{fix_column_signs, singular_values, spectral_norm, thin_svd};
use crate::mf::{check_shape, data_term, FactorPair, LossKind, NaturalParamMatrix, ObservedMatrix};
use crate::rng::{rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop once the relative objective decrease of an iteration falls below this.
    pub rel_tol: f64,
    pub backtracking_shrink: f64,
    /// First trial step of the convex solver, in units of the inverse curvature
    /// bound of the data term.
    pub initial_step: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iters: 500, rel_tol: 1e-6, backtracking_shrink: 0.5, initial_step: 1.0, seed: 0 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return invalid("max_iters must be at least 1");
        }
        if !(self.rel_tol > 0.0) {
            return invalid("rel_tol must be positive");
        }
        if !(self.backtracking_shrink > 0.0 && self.backtracking_shrink < 1.0) {
            return invalid("backtracking_shrink must lie in (0, 1)");
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return invalid("initial_step must be positive");
        }
        Ok(())
    }
}

/// Singular value thresholding: the proximal operator of `tau * ||.||_*`.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    svt_with_norm(m, tau).0
}

/// [`svt`] plus the nuclear norm of the result.
fn svt_with_norm(m: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, f64) {
    debug_assert!(tau >= 0.0);
    let svd = thin_svd(m);
    let kept: Vec<(usize, f64)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| (i, s - tau))
        .filter(|&(_, s)| s > 0.0)
        .collect();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut norm = 0.0;
    for (i, s) in kept {
        norm += s;
        let u = svd.u.column(i) * s;
        out.ger(1.0, &u, &svd.v_t.row(i).transpose(), 1.0);
    }
    (out, norm)
}

/// Result of a convex solve. `objective_trace[t]` is the objective after `t` accepted steps.
#[derive(Debug, Clone)]
pub struct ConvexFit {
    pub phi: NaturalParamMatrix,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ConvexFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Gradient of the smooth data term; zero off the observed set.
fn data_gradient(obs: &ObservedMatrix, phi: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(obs.n_rows(), obs.n_cols());
    let losses = obs.col_losses();
    for e in obs.entries() {
        g[(e.row, e.col)] = scale * losses[e.col].grad_unchecked(e.value, phi[(e.row, e.col)]);
    }
    g
}

/// Upper bound on the curvature of the scaled data term; Poisson columns, whose
/// curvature is unbounded, contribute their curvature at zero.
fn curvature_bound(obs: &ObservedMatrix, scale: f64) -> f64 {
    let worst = obs
        .col_losses()
        .iter()
        .map(|kind| match *kind {
            LossKind::Gaussian { variance } => 1.0 / variance,
            LossKind::Bernoulli => 0.25,
            LossKind::Poisson => 1.0,
        })
        .fold(0.0, f64::max);
    scale * worst
}

/// Smallest `lambda` for which the zero matrix solves the convex problem: the
/// spectral norm of the data-term gradient at zero.
pub fn lambda_max(obs: &ObservedMatrix) -> Result<f64> {
    let c = obs.scale_factor()?;
    let g = data_gradient(obs, &DMatrix::zeros(obs.n_rows(), obs.n_cols()), c);
    Ok(spectral_norm(&g))
}

/// `count` log-spaced values from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, count: usize, min_ratio: f64) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lambda_max],
        _ => (0..count)
            .map(|i| lambda_max * min_ratio.powf(i as f64 / (count - 1) as f64))
            .collect(),
    }
}

/// Default grid: 20 values spanning four decades below [`lambda_max`].
pub fn default_lambda_grid(obs: &ObservedMatrix) -> Result<Vec<f64>> {
    Ok(lambda_grid(lambda_max(obs)?, 20, 1e-4))
}

/// Regularization level from the consistency theory,
/// `2 c0 sigma' sqrt(N p) sqrt(r Nbar log Nbar / |Omega|)` with `Nbar = max(N, p)`.
///
/// `c0` is an unidentified constant, so this is never used as a default.
pub fn theoretical_lambda(c0: f64, sigma_prime: f64, n: usize, p: usize, r: usize, n_observed: usize) -> f64 {
    let nbar = n.max(p) as f64;
    2.0 * c0 * sigma_prime * ((n * p) as f64).sqrt() * (r as f64 * nbar * nbar.ln() / n_observed as f64).sqrt()
}

/// Solves the convex problem from the zero matrix.
pub fn solve_convex(obs: &ObservedMatrix, lambda: f64, opts: &SolverOptions) -> Result<ConvexFit> {
    solve_convex_from(obs, lambda, opts, &NaturalParamMatrix::zeros(obs.n_rows(), obs.n_cols()))
}

/// Proximal gradient with backtracking, started at `init`.
///
/// Each trial step `s` is accepted when the data term lies under its quadratic
/// model with curvature `1/s`, which makes every accepted step a descent step for
/// the full objective. The step is allowed to grow again after a run of
/// first-try acceptances.
pub fn solve_convex_from(
    obs: &ObservedMatrix,
    lambda: f64,
    opts: &SolverOptions,
    init: &NaturalParamMatrix,
) -> Result<ConvexFit> {
    opts.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid(format!("lambda must be finite and non-negative, got {lambda}"));
    }
    let c = obs.scale_factor()?;
    check_shape(obs, init.values())?;

    let mut phi = init.values().clone();
    let mut f_cur = data_term(obs, &phi)?;
    let mut obj = f_cur + if lambda > 0.0 { lambda * init.nuclear_norm() } else { 0.0 };
    if !obj.is_finite() {
        return Err(Error::Diverged { iteration: 0, objective: obj });
    }
    let mut trace = vec![obj];
    let mut step = opts.initial_step / curvature_bound(obs, c);
    let mut easy_run = 0usize;
    let min_step = step * 1e-20;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let grad = data_gradient(obs, &phi, c);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: iterations, objective: obj });
        }
        if easy_run >= 2 {
            step /= opts.backtracking_shrink;
            easy_run = 0;
        }
        let mut first_try = true;
        let (next, f_next, nuc_next) = loop {
            let (z, nuc) = if lambda > 0.0 {
                svt_with_norm(&(&phi - &grad * step), step * lambda)
            } else {
                (&phi - &grad * step, 0.0)
            };
            let f_z = data_term(obs, &z)?;
            if f_z.is_finite() {
                let diff = &z - &phi;
                let model = f_cur + grad.dot(&diff) + diff.norm_squared() / (2.0 * step);
                if f_z <= model + 1e-12 * f_cur.abs().max(1.0) {
                    break (z, f_z, nuc);
                }
            }
            first_try = false;
            step *= opts.backtracking_shrink;
            if step < min_step {
                return Err(Error::Diverged { iteration: iterations, objective: f_z });
            }
        };
        easy_run = if first_try { easy_run + 1 } else { 0 };

        let obj_next = f_next + lambda * nuc_next;
        if !obj_next.is_finite() {
            return Err(Error::Diverged { iteration: iterations, objective: obj_next });
        }
        if obj_next > obj {
            // Only rounding can get here; the previous iterate is already optimal
            // to machine precision.
            converged = true;
            break;
        }
        let decrease = obj - obj_next;
        phi = next;
        f_cur = f_next;
        obj = obj_next;
        trace.push(obj);
        if decrease <= opts.rel_tol * obj.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    Ok(ConvexFit { phi: NaturalParamMatrix::new(phi)?, objective_trace: trace, iterations, converged })
}

/// Result of a factored solve. `objective_trace[t]` is the objective after `t` alternations.
#[derive(Debug, Clone)]
pub struct NonconvexFit {
    pub factors: FactorPair,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of row updates where damped Newton failed and the bisection
    /// line search along the negative gradient was used instead.
    pub bisection_fallbacks: usize,
}

impl NonconvexFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Objective of the factored problem, on the same scale as [`crate::mf::objective`].
pub fn nonconvex_objective(obs: &ObservedMatrix, factors: &FactorPair, lambda: f64) -> Result<f64> {
    let c = obs.scale_factor()?;
    let (u, v) = (factors.left(), factors.right());
    if u.nrows() != obs.n_rows() || v.nrows() != obs.n_cols() {
        return invalid("factor shapes do not match observed grid");
    }
    let losses = obs.col_losses();
    let data: f64 = obs
        .entries()
        .iter()
        .map(|e| losses[e.col].value_unchecked(e.value, u.row(e.row).dot(&v.row(e.col))))
        .sum();
    Ok(c * data + 0.5 * lambda * (u.norm_squared() + v.norm_squared()))
}

/// One observation attached to a factor row: index of the partner row, value, loss.
#[derive(Clone, Copy)]
struct Item {
    other: usize,
    x: f64,
    kind: LossKind,
}

struct RowProblem<'a> {
    items: &'a [Item],
    other: &'a [f64],
    k: usize,
    scale: f64,
    lambda: f64,
}

impl RowProblem<'_> {
    fn partner(&self, idx: usize) -> &[f64] {
        &self.other[idx * self.k..(idx + 1) * self.k]
    }

    fn value(&self, u: &[f64]) -> f64 {
        let data: f64 = self
            .items
            .iter()
            .map(|it| it.kind.value_unchecked(it.x, dot(u, self.partner(it.other))))
            .sum();
        self.scale * data + 0.5 * self.lambda * dot(u, u)
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = u.iter().map(|v| self.lambda * v).collect();
        for it in self.items {
            let w = self.partner(it.other);
            let d = self.scale * it.kind.grad_unchecked(it.x, dot(u, w));
            axpy(&mut g, d, w);
        }
        g
    }

    fn gradient_and_hessian(&self, u: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let k = self.k;
        let mut g: Vec<f64> = u.iter().map(|v| self.lambda * v).collect();
        let mut h = DMatrix::<f64>::identity(k, k) * self.lambda;
        for it in self.items {
            let w = self.partner(it.other);
            let eta = dot(u, w);
            axpy(&mut g, self.scale * it.kind.grad_unchecked(it.x, eta), w);
            let c = self.scale * it.kind.hess(eta);
            for b in 0..k {
                let cb = c * w[b];
                for a in b..k {
                    h[(a, b)] += cb * w[a];
                }
            }
        }
        for b in 0..k {
            for a in 0..b {
                h[(a, b)] = h[(b, a)];
            }
        }
        (g, h)
    }

    /// Up to `max_steps` damped Newton steps on this row. Returns whether the
    /// bisection fallback was needed.
    fn minimize(&self, u: &mut [f64], shrink: f64, max_steps: usize) -> bool {
        let mut fell_back = false;
        let mut f0 = self.value(u);
        for _ in 0..max_steps {
            let (g, h) = self.gradient_and_hessian(u);
            let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gnorm == 0.0 {
                break;
            }
            let d = newton_direction(&h, &g);
            let gd = d.as_ref().map(|d| dot(&g, d)).unwrap_or(0.0);
            let mut accepted = None;
            if let Some(d) = d.as_ref().filter(|_| gd < 0.0) {
                let mut t = 1.0;
                for _ in 0..40 {
                    let cand: Vec<f64> = u.iter().zip(d).map(|(a, b)| a + t * b).collect();
                    let f1 = self.value(&cand);
                    if f1.is_finite() && f1 <= f0 + 1e-4 * t * gd {
                        accepted = Some((cand, f1));
                        break;
                    }
                    t *= shrink;
                }
            }
            let (cand, f1) = match accepted {
                Some(found) => found,
                None => {
                    fell_back = true;
                    match self.bisect_along_gradient(u, &g, f0) {
                        Some(found) => found,
                        None => break,
                    }
                }
            };
            let gain = f0 - f1;
            u.copy_from_slice(&cand);
            f0 = f1;
            if gain <= 1e-14 * f0.abs().max(1.0) {
                break;
            }
        }
        fell_back
    }

    /// Exact line search along `-g` by bisection on the directional derivative.
    fn bisect_along_gradient(&self, u: &[f64], g: &[f64], f0: f64) -> Option<(Vec<f64>, f64)> {
        let at = |t: f64| -> Vec<f64> { u.iter().zip(g).map(|(a, b)| a - t * b).collect() };
        let slope = |t: f64| -> f64 { -dot(g, &self.gradient(&at(t))) };
        let gg = dot(g, g);
        if gg == 0.0 {
            return None;
        }
        let mut lo = 0.0;
        let mut hi = 1.0 / gg.sqrt();
        let mut grow = 0;
        while slope(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
            grow += 1;
            if grow > 200 {
                return None;
            }
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        let cand = at(0.5 * (lo + hi));
        let f1 = self.value(&cand);
        (f1.is_finite() && f1 < f0).then_some((cand, f1))
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_iterator(g.len(), g.iter().map(|v| -v));
    let mut h = h.clone();
    let jitter = 1e-12 * h.diagonal().amax().max(1e-300);
    for attempt in 0..3 {
        if let Some(chol) = h.clone().cholesky() {
            let d = chol.solve(&rhs);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d.iter().copied().collect());
            }
        }
        let bump = jitter * 1e3f64.powi(attempt);
        for i in 0..h.nrows() {
            h[(i, i)] += bump;
        }
    }
    None
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const NEWTON_STEPS_PER_ROW: usize = 3;

/// Alternating minimization of the factored objective.
///
/// `U` and `V` start as i.i.d. `N(0, 1/k)` entries drawn from `opts.seed`. Each
/// alternation updates every row of `U` with `V` fixed, then every row of `V`
/// with `U` fixed; each row subproblem is a regularized convex GLM fit solved by
/// damped Newton, falling back to a bisection line search along the negative
/// gradient when Newton cannot make progress. Every row update is a descent
/// step, so the objective is non-increasing across alternations.
pub fn solve_nonconvex(obs: &ObservedMatrix, k: usize, lambda: f64, opts: &SolverOptions) -> Result<NonconvexFit> {
    let (n, p) = (obs.n_rows(), obs.n_cols());
    if k == 0 || k > n.min(p) {
        return invalid(format!("rank k must lie in [1, {}], got {k}", n.min(p)));
    }
    let mut rng = rng_for(opts.seed, &[tag::INIT]);
    let scale = 1.0 / (k as f64).sqrt();
    let u: Vec<f64> = (0..n * k).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let v: Vec<f64> = (0..p * k).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    solve_nonconvex_from(obs, k, lambda, opts, u, v)
}

fn solve_nonconvex_from(
    obs: &ObservedMatrix,
    k: usize,
    lambda: f64,
    opts: &SolverOptions,
    mut u: Vec<f64>,
    mut v: Vec<f64>,
) -> Result<NonconvexFit> {
    opts.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid(format!("lambda must be finite and non-negative, got {lambda}"));
    }
    let c = obs.scale_factor()?;
    let (n, p) = (obs.n_rows(), obs.n_cols());
    let losses = obs.col_losses();
    let mut by_row: Vec<Vec<Item>> = vec![Vec::new(); n];
    let mut by_col: Vec<Vec<Item>> = vec![Vec::new(); p];
    for e in obs.entries() {
        let kind = losses[e.col];
        by_row[e.row].push(Item { other: e.col, x: e.value, kind });
        by_col[e.col].push(Item { other: e.row, x: e.value, kind });
    }

    let to_pair = |u: &[f64], v: &[f64]| -> Result<FactorPair> {
        FactorPair::new(DMatrix::from_row_slice(n, k, u), DMatrix::from_row_slice(p, k, v))
    };
    let objective_of = |u: &[f64], v: &[f64]| -> f64 {
        let data: f64 = obs
            .entries()
            .iter()
            .map(|e| {
                let eta = dot(&u[e.row * k..(e.row + 1) * k], &v[e.col * k..(e.col + 1) * k]);
                losses[e.col].value_unchecked(e.value, eta)
            })
            .sum();
        c * data + 0.5 * lambda * (dot(u, u) + dot(v, v))
    };

    let mut obj = objective_of(&u, &v);
    if !obj.is_finite() {
        return Err(Error::Diverged { iteration: 0, objective: obj });
    }
    let mut trace = vec![obj];
    let mut fallbacks = 0;
    let mut converged = false;
    let mut iterations = 0;
    let shrink = opts.backtracking_shrink;

    let sweep = |target: &mut [f64], other: &[f64], lists: &[Vec<Item>]| -> usize {
        target
            .par_chunks_mut(k)
            .zip(lists.par_iter())
            .map(|(row, items)| {
                let problem = RowProblem { items, other, k, scale: c, lambda };
                usize::from(problem.minimize(row, shrink, NEWTON_STEPS_PER_ROW))
            })
            .sum()
    };

    while iterations < opts.max_iters {
        iterations += 1;
        fallbacks += sweep(&mut u, &v, &by_row);
        fallbacks += sweep(&mut v, &u, &by_col);
        let next = objective_of(&u, &v);
        if !next.is_finite() {
            return Err(Error::Diverged { iteration: iterations, objective: next });
        }
        // Row updates only ever decrease their own subproblem; clamp the
        // recorded value against summation-order rounding.
        let next = next.min(obj);
        let decrease = obj - next;
        obj = next;
        trace.push(obj);
        if decrease <= opts.rel_tol * obj.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    Ok(NonconvexFit {
        factors: to_pair(&u, &v)?,
        objective_trace: trace,
        iterations,
        converged,
        bisection_fallbacks: fallbacks,
    })
}

/// Estimated confounders: the top left singular vectors of a completed matrix.
#[derive(Debug, Clone)]
pub struct Confounders {
    /// `N x r_hat`, orthonormal columns, first non-negligible entry of each column positive.
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Set when `r_hat` exceeds the numerical rank at the default threshold.
    pub rank_warning: bool,
}

pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-7;

pub fn extract_confounders(phi_hat: &NaturalParamMatrix, r_hat: usize) -> Result<Confounders> {
    let (n, p) = phi_hat.shape();
    if r_hat == 0 || r_hat > n.min(p) {
        return invalid(format!("r_hat must lie in [1, {}], got {r_hat}", n.min(p)));
    }
    let svd = thin_svd(phi_hat.values());
    let mut basis = svd.u.columns(0, r_hat).into_owned();
    fix_column_signs(&mut basis);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let rank = rank_from_singular_values(&sv, DEFAULT_RANK_THRESHOLD);
    Ok(Confounders { basis, singular_values: sv, rank_warning: r_hat > rank })
}

/// Number of singular values above `rel_threshold * sigma_1` (0 for the zero matrix).
///
/// Panics when `rel_threshold` is outside `(0, 1)`.
pub fn effective_rank(phi_hat: &NaturalParamMatrix, rel_threshold: f64) -> usize {
    let sv: Vec<f64> = singular_values(phi_hat.values()).iter().copied().collect();
    rank_from_singular_values(&sv, rel_threshold)
}

fn rank_from_singular_values(sv: &[f64], rel_threshold: f64) -> usize {
    assert!(
        rel_threshold > 0.0 && rel_threshold < 1.0,
        "rank threshold must lie in (0, 1), got {rel_threshold}"
    );
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_threshold * top).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SolverKind {
    /// Proximal gradient on the nuclear-norm problem throughout.
    Convex,
    /// Factored solver with `k` columns for the fold fits; the final fit is the
    /// factored solution polished by the convex solver so its rank is exact.
    Factored { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub folds: usize,
    pub solver: SolverKind,
    pub rank_threshold: f64,
    /// When set to `K`, every fold fit is also scored after truncation to its
    /// top `k` singular components for `k = 1..=K`, and `(lambda, k)` is chosen
    /// jointly (see [`RankChoice`]).
    pub max_truncation_rank: Option<usize>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { folds: 5, solver: SolverKind::Convex, rank_threshold: DEFAULT_RANK_THRESHOLD, max_truncation_rank: None }
    }
}

/// Joint cross-validated choice of `lambda` and a truncation rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankChoice {
    pub lambda: f64,
    pub rank: usize,
    /// `heldout_mean[l][k - 1]`: mean held-out loss at grid value `l` truncated to rank `k`.
    pub heldout_mean: Vec<Vec<f64>>,
}

/// A fold whose training set leaves some rows or columns without observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FoldFlag {
    pub fold: usize,
    pub empty_rows: usize,
    pub empty_cols: usize,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    pub heldout_mean: Vec<f64>,
    pub heldout_sd: Vec<f64>,
    pub chosen_lambda: f64,
    pub chosen_rank: usize,
    pub fold_flags: Vec<FoldFlag>,
    /// Full-data fit at `chosen_lambda`.
    pub fit: NaturalParamMatrix,
    pub fit_converged: bool,
    /// Present when [`CvOptions::max_truncation_rank`] is set.
    pub rank_choice: Option<RankChoice>,
}

/// Random balanced partition of `n_entries` observed entries into `folds` groups.
pub fn fold_assignment(n_entries: usize, folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n_entries).collect();
    order.shuffle(&mut rng_for(seed, &[tag::FOLDS]));
    let mut fold = vec![0; n_entries];
    for (pos, &idx) in order.iter().enumerate() {
        fold[idx] = pos % folds;
    }
    fold
}

fn fit_phi(obs: &ObservedMatrix, lambda: f64, kind: SolverKind, opts: &SolverOptions) -> Result<(NaturalParamMatrix, bool)> {
    match kind {
        SolverKind::Convex => {
            let fit = solve_convex(obs, lambda, opts)?;
            Ok((fit.phi, fit.converged))
        }
        SolverKind::Factored { k } => {
            let fit = solve_nonconvex(obs, k.min(obs.n_rows().min(obs.n_cols())), lambda, opts)?;
            Ok((fit.factors.product()?, fit.converged))
        }
    }
}

/// Full-data fit used after cross-validation: the convex solution, computed
/// directly or polished from the factored solution. Returns the fit and
/// whether the solver met its tolerance.
pub fn fit_at_lambda(
    obs: &ObservedMatrix,
    lambda: f64,
    kind: SolverKind,
    opts: &SolverOptions,
) -> Result<(NaturalParamMatrix, bool)> {
    match kind {
        SolverKind::Convex => fit_phi(obs, lambda, SolverKind::Convex, opts),
        SolverKind::Factored { .. } => {
            let (warm, _) = fit_phi(obs, lambda, kind, opts)?;
            let polished = solve_convex_from(obs, lambda, opts, &warm)?;
            Ok((polished.phi, polished.converged))
        }
    }
}

/// Selects `lambda` by entry-holdout cross-validation.
///
/// The observed entries are split into `folds` random groups from `opts.seed`.
/// For each fold and grid value the model is fit on the other folds and scored
/// by the mean held-out loss. The `lambda` with the smallest mean held-out loss
/// wins, ties going to the larger `lambda`; the model is then refit on all
/// entries and its effective rank reported.
pub fn cross_validate(
    obs: &ObservedMatrix,
    lambda_grid: &[f64],
    cv: &CvOptions,
    opts: &SolverOptions,
) -> Result<CvResult> {
    if lambda_grid.is_empty() {
        return invalid("lambda grid is empty");
    }
    if cv.folds < 2 {
        return invalid("at least two folds are required");
    }
    if obs.n_observed() < cv.folds {
        return invalid(format!("{} observed entries cannot fill {} folds", obs.n_observed(), cv.folds));
    }
    if let Some(bad) = lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return invalid(format!("invalid lambda {bad} in grid"));
    }
    opts.validate()?;

    let assignment = fold_assignment(obs.n_observed(), cv.folds, opts.seed);
    let entries = obs.entries();
    let mut fold_flags = Vec::new();
    let splits: Vec<(ObservedMatrix, Vec<usize>)> = (0..cv.folds)
        .map(|f| {
            let mut train = Vec::new();
            let mut held = Vec::new();
            for (idx, e) in entries.iter().enumerate() {
                if assignment[idx] == f {
                    held.push(idx);
                } else {
                    train.push(*e);
                }
            }
            (obs.with_entries(train), held)
        })
        .collect();
    for (f, (train, _)) in splits.iter().enumerate() {
        let mut row_seen = vec![false; obs.n_rows()];
        let mut col_seen = vec![false; obs.n_cols()];
        for e in train.entries() {
            row_seen[e.row] = true;
            col_seen[e.col] = true;
        }
        let empty_rows = row_seen.iter().filter(|s| !**s).count();
        let empty_cols = col_seen.iter().filter(|s| !**s).count();
        if empty_rows + empty_cols > 0 {
            fold_flags.push(FoldFlag { fold: f, empty_rows, empty_cols });
        }
    }

    let jobs: Vec<(usize, usize)> =
        (0..cv.folds).flat_map(|f| (0..lambda_grid.len()).map(move |l| (f, l))).collect();
    let losses = obs.col_losses();
    let max_k = cv.max_truncation_rank.map(|k| k.clamp(1, obs.n_rows().min(obs.n_cols())));
    let outcomes: Vec<(f64, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(f, l)| -> Result<(f64, Vec<f64>)> {
            let (train, held) = &splits[f];
            let (phi, _) = fit_phi(train, lambda_grid[l], cv.solver, opts)?;
            let phi = phi.values();
            let total: f64 = held
                .iter()
                .map(|&idx| {
                    let e = entries[idx];
                    losses[e.col].value_unchecked(e.value, phi[(e.row, e.col)])
                })
                .sum();
            let truncated = match max_k {
                Some(k) => truncated_heldout_losses(phi, held, entries, losses, k),
                None => Vec::new(),
            };
            Ok((total / held.len() as f64, truncated))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = outcomes.iter().map(|o| o.0).collect();

    let n_grid = lambda_grid.len();
    let mut heldout_mean = vec![0.0; n_grid];
    let mut heldout_sd = vec![0.0; n_grid];
    for l in 0..n_grid {
        let vals: Vec<f64> = (0..cv.folds).map(|f| scores[f * n_grid + l]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        heldout_mean[l] = mean;
        heldout_sd[l] = var.sqrt();
    }
    if heldout_mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::Diverged { iteration: 0, objective: f64::NAN });
    }

    let mut best = 0;
    for l in 1..n_grid {
        let (m, b) = (heldout_mean[l], heldout_mean[best]);
        let tie = (m - b).abs() <= 1e-12 * b.abs().max(1e-300);
        if (tie && lambda_grid[l] > lambda_grid[best]) || (!tie && m < b) {
            best = l;
        }
    }
    let chosen_lambda = lambda_grid[best];

    let (fit, fit_converged) = fit_at_lambda(obs, chosen_lambda, cv.solver, opts)?;
    let chosen_rank = effective_rank(&fit, cv.rank_threshold);

    let rank_choice = max_k.map(|k| {
        let heldout: Vec<Vec<f64>> = (0..n_grid)
            .map(|l| {
                (0..k)
                    .map(|r| (0..cv.folds).map(|f| outcomes[f * n_grid + l].1[r]).sum::<f64>() / cv.folds as f64)
                    .collect()
            })
            .collect();
        let mut best = (0, 0);
        for l in 0..n_grid {
            for r in 0..k {
                let (m, b) = (heldout[l][r], heldout[best.0][best.1]);
                let tie = (m - b).abs() <= 1e-12 * b.abs().max(1e-300);
                let preferred = lambda_grid[l] > lambda_grid[best.0] || (lambda_grid[l] == lambda_grid[best.0] && r < best.1);
                if (tie && preferred) || (!tie && m < b) {
                    best = (l, r);
                }
            }
        }
        RankChoice { lambda: lambda_grid[best.0], rank: best.1 + 1, heldout_mean: heldout }
    });

    Ok(CvResult {
        lambda_grid: lambda_grid.to_vec(),
        heldout_mean,
        heldout_sd,
        chosen_lambda,
        chosen_rank,
        fold_flags,
        fit,
        fit_converged,
        rank_choice,
    })
}

/// Mean held-out loss of `phi` truncated to its top `k` singular components,
/// for `k = 1..=max_k`.
fn truncated_heldout_losses(
    phi: &DMatrix<f64>,
    held: &[usize],
    entries: &[crate::mf::Entry],
    losses: &[LossKind],
    max_k: usize,
) -> Vec<f64> {
    let svd = thin_svd(phi);
    let mut totals = vec![0.0; max_k];
    for &idx in held {
        let e = entries[idx];
        let mut eta = 0.0;
        for (r, total) in totals.iter_mut().enumerate() {
            if r < svd.singular_values.len() {
                eta += svd.singular_values[r] * svd.u[(e.row, r)] * svd.v_t[(r, e.col)];
            }
            *total += losses[e.col].value_unchecked(e.value, eta);
        }
    }
    totals.iter().map(|t| t / held.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{principal_angle, SubspaceBasis};
    use rand::SeedableRng;

    fn gaussian_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    fn low_rank(n: usize, p: usize, r: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(n, r, seed) * gaussian_matrix(p, r, seed + 1000).transpose()
    }

    fn unit_gaussian(x: &DMatrix<f64>) -> ObservedMatrix {
        ObservedMatrix::from_dense(x, vec![LossKind::UNIT_GAUSSIAN; x.ncols()]).unwrap()
    }

    fn tight() -> SolverOptions {
        SolverOptions { max_iters: 20_000, rel_tol: 1e-15, ..SolverOptions::default() }
    }

    #[test]
    fn svt_diagonal_example() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let z = svt(&m, 2.0);
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((z - want).amax() < 1e-14);
    }

    #[test]
    fn svt_above_top_singular_value_is_zero() {
        let m = gaussian_matrix(6, 4, 1);
        let top = spectral_norm(&m);
        assert_eq!(svt(&m, top).amax(), 0.0);
        assert_eq!(svt(&m, 10.0 * top).amax(), 0.0);
    }

    /// Prox of `tau ||.||_*` at `m` by alternating exact ridge updates on the
    /// variational form `min_{A, B} 1/2 ||A B^T - m||^2 + tau/2 (||A||^2 + ||B||^2)`.
    fn prox_by_alternating_ridge(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
        let k = m.ncols();
        let mut a = gaussian_matrix(m.nrows(), k, 77) * 0.5;
        let mut b = gaussian_matrix(m.ncols(), k, 78) * 0.5;
        let eye = DMatrix::<f64>::identity(k, k) * tau;
        let mut prev = f64::INFINITY;
        for _ in 0..200_000 {
            let gb = b.tr_mul(&b) + &eye;
            a = (m * &b) * gb.try_inverse().unwrap();
            let ga = a.tr_mul(&a) + &eye;
            b = (m.transpose() * &a) * ga.try_inverse().unwrap();
            let obj = 0.5 * (&a * b.transpose() - m).norm_squared()
                + 0.5 * tau * (a.norm_squared() + b.norm_squared());
            if prev - obj < 1e-16 {
                break;
            }
            prev = obj;
        }
        a * b.transpose()
    }

    #[test]
    fn svt_matches_prox_oracle() {
        let m = gaussian_matrix(5, 4, 3);
        let z = svt(&m, 0.7);
        let oracle = prox_by_alternating_ridge(&m, 0.7);
        assert!((&z - &oracle).amax() < 1e-6, "{}", (&z - &oracle).amax());
        // Optimality certificate: (m - z) / tau is a subgradient of ||.||_* at z.
        let w = (&m - &z) / 0.7;
        assert!(spectral_norm(&w) <= 1.0 + 1e-10);
        assert!((w.dot(&z) - nuclear_norm_of(&z)).abs() < 1e-10);
    }

    fn nuclear_norm_of(m: &DMatrix<f64>) -> f64 {
        singular_values(m).sum()
    }

    #[test]
    fn full_gaussian_solve_is_svt() {
        let x = gaussian_matrix(8, 6, 4);
        let obs = unit_gaussian(&x);
        for lambda in [0.0, 0.5, 1.5, 3.0] {
            let fit = solve_convex(&obs, lambda, &tight()).unwrap();
            assert!((fit.phi.values() - svt(&x, lambda)).amax() < 1e-8, "lambda {lambda}");
        }
    }

    #[test]
    fn lambda_max_gives_zero_solution() {
        let x = gaussian_matrix(10, 7, 5);
        let obs = ObservedMatrix::from_dense_masked(&x, |i, j| (i + 2 * j) % 3 != 0, vec![LossKind::UNIT_GAUSSIAN; 7])
            .unwrap();
        let top = lambda_max(&obs).unwrap();
        let fit = solve_convex(&obs, top * 1.0001, &tight()).unwrap();
        assert_eq!(fit.phi.values().amax(), 0.0);
        let fit = solve_convex(&obs, top * 0.9, &tight()).unwrap();
        assert!(fit.phi.values().amax() > 0.0);

        let signs = x.map(|v| if v > 0.0 { 1.0 } else { -1.0 });
        let obs = ObservedMatrix::from_dense(&signs, vec![LossKind::Bernoulli; 7]).unwrap();
        let fit = solve_convex(&obs, lambda_max(&obs).unwrap() * 1.0001, &tight()).unwrap();
        assert_eq!(fit.phi.values().amax(), 0.0);
    }

    #[test]
    fn convex_rejects_bad_lambda() {
        let obs = unit_gaussian(&gaussian_matrix(3, 3, 1));
        assert!(solve_convex(&obs, -1.0, &SolverOptions::default()).is_err());
        assert!(solve_convex(&obs, f64::NAN, &SolverOptions::default()).is_err());
    }

    #[test]
    fn lambda_grid_is_log_spaced() {
        let g = lambda_grid(10.0, 5, 1e-4);
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 10.0);
        assert!((g[4] - 1e-3).abs() < 1e-15);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 0.1).abs() < 1e-12);
        }
        assert_eq!(lambda_grid(2.0, 1, 0.1), vec![2.0]);
    }

    #[test]
    fn nonconvex_rejects_bad_rank() {
        let obs = unit_gaussian(&gaussian_matrix(4, 3, 1));
        assert!(solve_nonconvex(&obs, 0, 0.1, &SolverOptions::default()).is_err());
        assert!(solve_nonconvex(&obs, 4, 0.1, &SolverOptions::default()).is_err());
    }

    #[test]
    fn nonconvex_exact_factorization_without_penalty() {
        let x = low_rank(12, 9, 3, 6);
        let obs = unit_gaussian(&x);
        let fit = solve_nonconvex(&obs, 4, 0.0, &tight()).unwrap();
        let rel = (fit.factors.product().unwrap().values() - &x).norm() / x.norm();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn nonconvex_large_penalty_zeroes_factors() {
        let x = low_rank(10, 8, 2, 7);
        let obs = unit_gaussian(&x);
        let lambda = 10.0 * lambda_max(&obs).unwrap();
        let fit = solve_nonconvex(&obs, 3, lambda, &tight()).unwrap();
        assert!(fit.factors.left().amax() < 1e-8);
        assert!(fit.factors.right().amax() < 1e-8);
    }

    #[test]
    fn nonconvex_is_deterministic_and_monotone() {
        let x = low_rank(15, 10, 2, 8).map(|v| if v > 0.0 { 1.0 } else { -1.0 });
        let obs = ObservedMatrix::from_dense(&x, vec![LossKind::Bernoulli; 10]).unwrap();
        let opts = SolverOptions { seed: 3, ..SolverOptions::default() };
        let a = solve_nonconvex(&obs, 3, 0.5, &opts).unwrap();
        let b = solve_nonconvex(&obs, 3, 0.5, &opts).unwrap();
        assert_eq!(a.factors, b.factors);
        for w in a.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        let objective = nonconvex_objective(&obs, &a.factors, 0.5).unwrap();
        assert!((objective - a.objective()).abs() <= 1e-9 * objective.abs());
    }

    #[test]
    fn rank_one_confounder() {
        let u = DVector::from_vec(vec![-1.0, 2.0, 0.5, 3.0]);
        let v = DVector::from_vec(vec![1.0, -2.0, 4.0]);
        let phi = NaturalParamMatrix::new(&u * v.transpose()).unwrap();
        let c = extract_confounders(&phi, 1).unwrap();
        let want = -&u / u.norm();
        assert!((c.basis.column(0) - want).amax() < 1e-12);
        assert!(!c.rank_warning);
        assert!(extract_confounders(&phi, 2).unwrap().rank_warning);
        assert!(extract_confounders(&phi, 0).is_err());
        assert!(extract_confounders(&phi, 4).is_err());
    }

    #[test]
    fn exact_rank_confounders_span_true_columns() {
        let u = gaussian_matrix(30, 4, 9);
        let phi = NaturalParamMatrix::new(&u * gaussian_matrix(12, 4, 10).transpose()).unwrap();
        let c = extract_confounders(&phi, 4).unwrap();
        let gram = c.basis.tr_mul(&c.basis);
        assert!((gram - DMatrix::<f64>::identity(4, 4)).amax() < 1e-10);
        let angle = principal_angle(&SubspaceBasis::orthonormalize(&u), &SubspaceBasis::new(c.basis).unwrap()).unwrap();
        assert!(angle < 1e-10, "angle {angle}");
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&NaturalParamMatrix::zeros(4, 3), 1e-7), 0);
        let d = NaturalParamMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 1e-12]))).unwrap();
        assert_eq!(effective_rank(&d, 1e-7), 2);
    }

    #[test]
    fn theoretical_lambda_formula() {
        let got = theoretical_lambda(0.5, 2.0, 100, 50, 5, 2500);
        let want = 2.0 * 0.5 * 2.0 * 5000f64.sqrt() * (5.0 * 100.0 * 100f64.ln() / 2500.0).sqrt();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn single_lambda_grid_is_chosen() {
        let x = low_rank(12, 8, 2, 11);
        let obs = unit_gaussian(&x);
        let cv = cross_validate(&obs, &[0.7], &CvOptions::default(), &SolverOptions::default()).unwrap();
        assert_eq!(cv.chosen_lambda, 0.7);
        assert_eq!(cv.heldout_mean.len(), 1);
    }

    #[test]
    fn cross_validation_is_deterministic() {
        let x = low_rank(14, 9, 2, 12);
        let obs = unit_gaussian(&x);
        let grid = default_lambda_grid(&obs).unwrap();
        let opts = SolverOptions { seed: 5, ..SolverOptions::default() };
        let a = cross_validate(&obs, &grid[..6], &CvOptions::default(), &opts).unwrap();
        let b = cross_validate(&obs, &grid[..6], &CvOptions::default(), &opts).unwrap();
        assert_eq!(a.heldout_mean, b.heldout_mean);
        assert_eq!(a.chosen_lambda, b.chosen_lambda);
        assert_eq!(a.fit, b.fit);
        assert!(a.lambda_grid.contains(&a.chosen_lambda));
        assert_eq!(fold_assignment(100, 5, 1), fold_assignment(100, 5, 1));
    }

    #[test]
    fn folds_are_balanced() {
        let f = fold_assignment(103, 5, 2);
        for k in 0..5 {
            let count = f.iter().filter(|&&v| v == k).count();
            assert!(count == 20 || count == 21);
        }
    }

    #[test]
    fn cross_validation_rejects_bad_input() {
        let obs = unit_gaussian(&gaussian_matrix(4, 4, 1));
        let cv = CvOptions::default();
        let opts = SolverOptions::default();
        assert!(cross_validate(&obs, &[], &cv, &opts).is_err());
        assert!(cross_validate(&obs, &[1.0], &CvOptions { folds: 1, ..cv }, &opts).is_err());
        assert!(cross_validate(&obs, &[-1.0], &cv, &opts).is_err());
    }

    #[test]
    fn sparse_folds_are_flagged() {
        let x = gaussian_matrix(6, 5, 2);
        let obs = ObservedMatrix::from_dense_masked(&x, |i, j| i == j || j == 0, vec![LossKind::UNIT_GAUSSIAN; 5])
            .unwrap();
        let cv = cross_validate(&obs, &[0.5], &CvOptions::default(), &SolverOptions::default()).unwrap();
        assert!(!cv.fold_flags.is_empty());
    }
}
