//! Sparse (restricted) largest eigenvalue.
//!
//! `lambda_max^(k)(A)` is the largest eigenvalue over all `k x k` principal
//! submatrices. [`exact_sparse_eigenvalue`] enumerates them. For larger
//! problems [`sdp_sparse_eigenvalue`] solves the convex relaxation
//!
//! ```text
//! maximize tr(A M)  subject to  M psd, tr M = 1, sum_ij |M_ij| <= k
//! ```
//!
//! by ADMM, splitting the feasible set into the spectahedron and the
//! elementwise l1 ball. Every few iterations the solver also forms a
//! certified interval around the optimum:
//!
//! * a feasible point obtained by shrinking the off-diagonal part of the
//!   current spectahedron iterate until the l1 constraint holds, or a rank-one
//!   point `x x'` with `||x||_2 = 1`, `||x||_1^2 <= k` refined by a few
//!   thresholded power steps from the leading eigenvector of that iterate;
//!   the better of the two is the lower bound;
//! * for the scaled dual variable `Y`, `lambda_max(A - Y) + k max|Y_ij|`,
//!   which bounds the optimum from above for any symmetric `Y`.
//!
//! The dual variable starts at `Y = clip(A, z)` for the `z` minimizing the
//! soft-threshold bound, with a small initial penalty.

pub mod projection;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, lanczos, max_eigenpair, max_eigenvalue, norm, DenseSym, SymOperator, DENSE_EIGEN_LIMIT};
use projection::{l1_ball_threshold, symmetrize, SpectahedronProjector};

/// Power steps per rank-one lower bound evaluation.
const POLISH_STEPS: usize = 30;

/// Largest number of supports the exact search will visit.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum SparseEigError {
    #[error("matrix must be square and symmetric")]
    NotSymmetric,
    #[error("sparsity must satisfy 1 <= ks, got {0}")]
    InvalidSparsity(usize),
    #[error("C({p}, {ks}) supports exceed the enumeration limit; use the SDP relaxation")]
    EnumerationTooLarge { p: usize, ks: usize },
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
    #[error("SDP solver stopped after {} iterations with gap {:.3e}", .0.iterations, .0.gap())]
    DidNotConverge(Box<SdpResult>),
}

/// `C(n, k)`, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

/// True when the exact search is allowed for this size.
pub fn enumeration_feasible(p: usize, ks: usize) -> bool {
    ks >= p || binomial(p, ks) <= ENUMERATION_LIMIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSparseEigen {
    pub value: f64,
    /// Zero-based indices of the maximizing principal submatrix.
    pub support: Vec<usize>,
}

fn check_square(a: &DMatrix<f64>) -> Result<(), SparseEigError> {
    if !a.is_square() || a.iter().any(|v| !v.is_finite()) {
        return Err(SparseEigError::NotSymmetric);
    }
    let p = a.nrows();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..p {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-9 * scale {
                return Err(SparseEigError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Largest eigenvalue over all principal submatrices of size `ks`, with the
/// lexicographically first maximizing support.
pub fn exact_sparse_eigenvalue(a: &DMatrix<f64>, ks: usize) -> Result<ExactSparseEigen, SparseEigError> {
    check_square(a)?;
    let p = a.nrows();
    if ks == 0 {
        return Err(SparseEigError::InvalidSparsity(ks));
    }
    if ks >= p {
        return Ok(ExactSparseEigen { value: max_eigenvalue(a), support: (0..p).collect() });
    }
    if !enumeration_feasible(p, ks) {
        return Err(SparseEigError::EnumerationTooLarge { p, ks });
    }
    let mut idx: Vec<usize> = (0..ks).collect();
    let mut sub = DMatrix::zeros(ks, ks);
    let mut best = ExactSparseEigen { value: f64::NEG_INFINITY, support: idx.clone() };
    loop {
        let value = if ks == 1 {
            a[(idx[0], idx[0])]
        } else {
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    sub[(r, c)] = a[(i, j)];
                }
            }
            sub.clone().symmetric_eigenvalues().max()
        };
        if value > best.value {
            best.value = value;
            best.support.copy_from_slice(&idx);
        }
        // next combination in lexicographic order
        let mut i = ks;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            if idx[i] < p - ks + i {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..ks {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// `lambda_max(st_z(A)) + ks z`, where `st_z` soft-thresholds every entry.
/// Bounds the relaxed sparse eigenvalue from above.
pub fn soft_threshold_bound(a: &DMatrix<f64>, z: f64, ks: usize) -> f64 {
    assert!(z >= 0.0, "threshold must be nonnegative");
    let st = a.map(|v| (v.abs() - z).max(0.0).copysign(v));
    max_eigenvalue(&st) + ks as f64 * z
}

/// Approximately minimizes [`soft_threshold_bound`] over `z`, by a coarse
/// grid followed by golden-section refinement. Returns `(bound, z)`.
pub fn tightest_soft_threshold(a: &DMatrix<f64>, ks: usize) -> (f64, f64) {
    let top = max_abs(a);
    if top == 0.0 {
        return (0.0, 0.0);
    }
    let mut buf = a.clone();
    let mut eval = |z: f64| {
        for (b, v) in buf.iter_mut().zip(a.iter()) {
            *b = (v.abs() - z).max(0.0).copysign(*v);
        }
        max_eigenvalue(&buf) + ks as f64 * z
    };
    const GRID: usize = 16;
    let step = top / GRID as f64;
    let values: Vec<f64> = (0..=GRID).map(|i| eval(i as f64 * step)).collect();
    let i = (0..=GRID).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap_or(0);
    let (mut best, mut best_z) = (values[i], i as f64 * step);
    let (mut lo, mut hi) = ((i as f64 - 1.0).max(0.0) * step, ((i + 1) as f64 * step).min(top));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..12 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = eval(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = eval(x2);
        }
    }
    for (f, z) in [(f1, x1), (f2, x2)] {
        if f < best {
            best = f;
            best_z = z;
        }
    }
    (best, best_z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdpSettings {
    pub max_iterations: usize,
    /// Bound on the primal residual, and on the relative certified gap.
    pub primal_tolerance: f64,
    pub dual_tolerance: f64,
    /// Initial ADMM penalty.
    pub penalty: f64,
    pub adaptive_penalty: bool,
    /// Iterations between certificate evaluations.
    pub check_every: usize,
}

impl Default for SdpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            primal_tolerance: 1e-6,
            dual_tolerance: 1e-6,
            penalty: 0.05,
            adaptive_penalty: true,
            check_every: 5,
        }
    }
}

impl SdpSettings {
    pub fn with_tolerance(tol: f64) -> Self {
        Self { primal_tolerance: tol, dual_tolerance: tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SparseEigError> {
        let bad = |m: &str| Err(SparseEigError::InvalidSettings(m.into()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.primal_tolerance > 0.0 && self.dual_tolerance > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return bad("penalty must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpResiduals {
    pub primal: f64,
    pub dual: f64,
}

#[derive(Debug, Clone)]
pub struct SdpResult {
    /// `tr(A M)` at the returned feasible `M`.
    pub value: f64,
    /// Certified upper bound on the relaxation optimum.
    pub upper_bound: f64,
    pub m_matrix: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: SdpResiduals,
}

impl SdpResult {
    /// Width of the certified interval.
    pub fn gap(&self) -> f64 {
        self.upper_bound - self.value
    }

    pub fn summary(&self) -> SdpSummary {
        SdpSummary {
            value: self.value,
            upper_bound: self.upper_bound,
            iterations: self.iterations,
            converged: self.converged,
            residuals: self.residuals,
        }
    }
}

/// Serializable part of an [`SdpResult`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpSummary {
    pub value: f64,
    pub upper_bound: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: SdpResiduals,
}

/// Shrink factor for the off-diagonal part of a unit-trace psd matrix that
/// brings its l1 norm down to `k`.
fn repair_factor(l1: f64, trace: f64, k: f64) -> f64 {
    let off = l1 - trace;
    if l1 <= k || off <= 0.0 {
        0.0
    } else {
        (1.0 - (k - trace) / off).clamp(0.0, 1.0)
    }
}

fn repaired(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let mut out = m * (1.0 - t);
    for i in 0..m.nrows() {
        out[(i, i)] = m[(i, i)];
    }
    out
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Upper bound `lambda_max(A - Y) + k max|Y_ij|`. The Ritz value is padded
/// by its residual norm.
struct DualBound {
    warm: Option<Vec<f64>>,
}

impl DualBound {
    fn evaluate(&mut self, ahat: &DMatrix<f64>, y: &DMatrix<f64>, k: f64) -> f64 {
        let shifted = ahat - y;
        let p = shifted.nrows();
        let top = if p <= DENSE_EIGEN_LIMIT {
            shifted.symmetric_eigenvalues().max()
        } else {
            let mut pad = 0.0;
            let found = lanczos(&DenseSym(&shifted), self.warm.as_deref(), 12, |values, residuals| {
                let scale = values[0].abs().max(f64::MIN_POSITIVE);
                (residuals[0] <= 1e-9 * scale).then(|| {
                    pad = residuals[0];
                    1
                })
            });
            self.warm = Some(found.vectors.column(0).iter().copied().collect());
            found.values[0] + pad
        };
        top + k * max_abs(y)
    }
}

/// Scales the soft-thresholded `y` to unit length, with the smallest
/// threshold that keeps the l1 norm at most `radius`.
fn sphere_l1(y: &[f64], radius: f64, out: &mut [f64]) -> bool {
    let ratio = |lam: f64| {
        let (mut l1, mut l2) = (0.0, 0.0);
        for v in y {
            let a = (v.abs() - lam).max(0.0);
            l1 += a;
            l2 += a * a;
        }
        (l1, l2.sqrt())
    };
    let (l1, l2) = ratio(0.0);
    if l2 == 0.0 {
        return false;
    }
    let mut lam = 0.0;
    if l1 > radius * l2 {
        let (mut lo, mut hi) = (0.0, y.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (a, b) = ratio(mid);
            if b > 0.0 && a > radius * b {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lam = hi;
    }
    for (o, v) in out.iter_mut().zip(y) {
        *o = (v.abs() - lam).max(0.0).copysign(*v);
    }
    let n = norm(out);
    if n == 0.0 {
        return false;
    }
    out.iter_mut().for_each(|v| *v /= n);
    true
}

enum Best {
    Repaired(DMatrix<f64>),
    RankOne(Vec<f64>),
}

/// Thresholded power iteration over unit vectors with `||x||_1^2 <= k`.
/// Returns the best `x' A x` seen and its vector.
fn rank_one_polish(a: &DMatrix<f64>, start: &[f64], k: f64, steps: usize) -> Option<(f64, Vec<f64>)> {
    let p = a.nrows();
    let radius = k.sqrt();
    let mut x = vec![0.0; p];
    if !sphere_l1(start, radius, &mut x) {
        return None;
    }
    let mut ax = vec![0.0; p];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..steps {
        DenseSym(a).apply(&x, &mut ax);
        let value = dot(&x, &ax);
        let improved = best.as_ref().map_or(f64::INFINITY, |(b, _)| value - b);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, x.clone()));
        }
        if improved <= 1e-12 * value.abs() {
            break;
        }
        if !sphere_l1(&ax, radius, &mut x) {
            break;
        }
    }
    best
}

/// Solves the SDP relaxation. On running out of iterations the best
/// feasible iterate comes back inside [`SparseEigError::DidNotConverge`].
pub fn sdp_sparse_eigenvalue(a: &DMatrix<f64>, ks: usize, settings: &SdpSettings) -> Result<SdpResult, SparseEigError> {
    solve(a, ks, settings, None)
}

/// Like [`sdp_sparse_eigenvalue`], but also stops as soon as the certified
/// interval lies entirely above or entirely at-or-below `threshold`. The
/// returned value then compares with `threshold` exactly as the optimum does.
pub fn sdp_decide(a: &DMatrix<f64>, ks: usize, settings: &SdpSettings, threshold: f64) -> Result<SdpResult, SparseEigError> {
    solve(a, ks, settings, Some(threshold))
}

fn solve(a: &DMatrix<f64>, ks: usize, settings: &SdpSettings, threshold: Option<f64>) -> Result<SdpResult, SparseEigError> {
    check_square(a)?;
    settings.validate()?;
    if ks == 0 {
        return Err(SparseEigError::InvalidSparsity(ks));
    }
    let p = a.nrows();
    let mut a = a.clone();
    symmetrize(&mut a);
    let residuals0 = SdpResiduals { primal: 0.0, dual: 0.0 };
    if ks >= p {
        let (value, v) = max_eigenpair(&a, None);
        let m = DMatrix::from_fn(p, p, |i, j| v[i] * v[j]);
        return Ok(SdpResult { value, upper_bound: value, m_matrix: m, iterations: 0, converged: true, residuals: residuals0 });
    }
    let lam = max_eigenvalue(&a);
    let scale = if lam > 0.0 { lam } else { max_abs(&a) };
    if scale == 0.0 {
        let m = DMatrix::identity(p, p) / p as f64;
        return Ok(SdpResult { value: 0.0, upper_bound: 0.0, m_matrix: m, iterations: 0, converged: true, residuals: residuals0 });
    }
    let ahat = &a / scale;
    let k = ks as f64;

    let mut rho = settings.penalty;
    let mut z = DMatrix::identity(p, p) / p as f64;
    // dual start at the soft-threshold certificate Y = clip(A, zeta)
    let (st_bound, zeta) = tightest_soft_threshold(&ahat, ks);
    let mut u = ahat.map(|v| v.clamp(-zeta, zeta) / rho);
    if threshold.is_some_and(|t| st_bound * scale <= t) {
        let (_, lead) = max_eigenpair(&ahat, None);
        if let Some((value, x)) = rank_one_polish(&ahat, &lead, k, POLISH_STEPS) {
            return Ok(SdpResult {
                value: value * scale,
                upper_bound: st_bound * scale,
                m_matrix: DMatrix::from_fn(p, p, |i, j| x[i] * x[j]),
                iterations: 0,
                converged: true,
                residuals: residuals0,
            });
        }
    }
    let mut w = DMatrix::<f64>::zeros(p, p);
    let mut v = DMatrix::<f64>::zeros(p, p);
    let mut projector = SpectahedronProjector::new();
    let mut dual = DualBound { warm: None };
    let mut best_lb = f64::NEG_INFINITY;
    let mut best = Best::Repaired(z.clone());
    let mut best_ub = st_bound.min(1.0);
    let mut residuals = SdpResiduals { primal: f64::INFINITY, dual: f64::INFINITY };
    let mut converged = false;
    let mut iterations = 0;
    let check_every = settings.check_every.max(1);

    for it in 1..=settings.max_iterations {
        iterations = it;
        let inv_rho = 1.0 / rho;
        for (((wi, zi), ui), ai) in w.iter_mut().zip(z.iter()).zip(u.iter()).zip(ahat.iter()) {
            *wi = zi - ui + ai * inv_rho;
        }
        // projections only need to be as accurate as the current iterate
        let ritz_tol = (1e-2 * residuals.primal.min(residuals.dual)).clamp(1e-10, 1e-5);
        let projection = projector.project(&w, ritz_tol);
        let m = projection.matrix();

        // Z = soft(M + U), U = (M + U) - Z, with both residuals in one pass
        for ((vi, mi), ui) in v.iter_mut().zip(m.iter()).zip(u.iter()) {
            *vi = mi + ui;
        }
        let tau = l1_ball_threshold(v.as_slice(), k);
        let (mut r2, mut s2) = (0.0, 0.0);
        for (((vi, mi), zi), ui) in v.iter().zip(m.iter()).zip(z.iter_mut()).zip(u.iter_mut()) {
            let znew = (vi.abs() - tau).max(0.0).copysign(*vi);
            r2 += (mi - znew) * (mi - znew);
            s2 += (znew - *zi) * (znew - *zi);
            *zi = znew;
            *ui = vi - znew;
        }
        residuals = SdpResiduals { primal: r2.sqrt(), dual: rho * s2.sqrt() };
        let small = residuals.primal <= settings.primal_tolerance && residuals.dual <= settings.dual_tolerance;

        if small || it % check_every == 0 || it == settings.max_iterations {
            let l1: f64 = m.iter().map(|x| x.abs()).sum();
            let trace = m.trace();
            let t = repair_factor(l1, trace, k);
            let diag_part: f64 = (0..p).map(|i| ahat[(i, i)] * m[(i, i)]).sum();
            let full = dot(ahat.as_slice(), m.as_slice());
            let lb = ((1.0 - t) * full + t * diag_part) / trace;
            if lb > best_lb {
                best_lb = lb;
                best = Best::Repaired(repaired(&m, t) / trace);
            }
            if projection.rank() > 0 {
                let lead: Vec<f64> = projection.vectors.column(0).iter().copied().collect();
                if let Some((value, x)) = rank_one_polish(&ahat, &lead, k, POLISH_STEPS) {
                    if value > best_lb {
                        best_lb = value;
                        best = Best::RankOne(x);
                    }
                }
            }
            best_ub = best_ub.min(dual.evaluate(&ahat, &(&u * rho), k));
            let gap = best_ub - best_lb;
            let settled = threshold.is_some_and(|t| best_lb * scale > t || best_ub * scale <= t);
            if small || settled || gap <= settings.primal_tolerance * best_lb.abs().max(best_ub.abs()) {
                converged = true;
                break;
            }
        }

        if settings.adaptive_penalty {
            if residuals.primal > 10.0 * residuals.dual {
                rho *= 2.0;
                u /= 2.0;
            } else if residuals.dual > 10.0 * residuals.primal {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }

    let mut best_m = match best {
        Best::Repaired(m) => m,
        Best::RankOne(x) => DMatrix::from_fn(p, p, |i, j| x[i] * x[j]),
    };
    symmetrize(&mut best_m);
    log::debug!(
        "sdp p={p} ks={ks}: {iterations} iterations, value {:.6e}, gap {:.3e}, converged {converged}",
        best_lb * scale,
        (best_ub - best_lb) * scale
    );
    let result = SdpResult {
        value: best_lb * scale,
        upper_bound: best_ub.max(best_lb) * scale,
        m_matrix: best_m,
        iterations,
        converged,
        residuals,
    };
    if converged {
        Ok(result)
    } else {
        Err(SparseEigError::DidNotConverge(Box::new(result)))
    }
}

/// The solution whether or not the solver reached its tolerance.
pub fn sdp_best_effort(a: &DMatrix<f64>, ks: usize, settings: &SdpSettings) -> Result<SdpResult, SparseEigError> {
    match sdp_sparse_eigenvalue(a, ks, settings) {
        Err(SparseEigError::DidNotConverge(best)) => {
            log::warn!("SDP did not converge after {} iterations (gap {:.3e}); using best iterate", best.iterations, best.gap());
            Ok(*best)
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(p: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(p, rank, |_, _| rng.gen::<f64>() - 0.5);
        let mut a = &g * g.transpose();
        symmetrize(&mut a);
        a
    }

    #[test]
    fn diagonal_examples() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let one = exact_sparse_eigenvalue(&a, 1).unwrap();
        assert_eq!((one.value, one.support), (3.0, vec![0]));
        let two = exact_sparse_eigenvalue(&a, 2).unwrap();
        assert_eq!((two.value, two.support), (3.0, vec![0, 1]));
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(10, 3), 120);
        assert_eq!(binomial(25, 12), 5_200_300);
        assert_eq!(binomial(3, 5), 0);
        assert!(enumeration_feasible(100, 2));
        assert!(!enumeration_feasible(100, 7));
        assert!(matches!(
            exact_sparse_eigenvalue(&DMatrix::identity(100, 100), 7),
            Err(SparseEigError::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn identity_objective_is_constant() {
        let r = sdp_sparse_eigenvalue(&DMatrix::identity(6, 6), 2, &SdpSettings::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_sparse_rank_one() {
        let mut a = DMatrix::zeros(5, 5);
        a[(2, 2)] = 1.0;
        let r = sdp_sparse_eigenvalue(&a, 1, &SdpSettings::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-6);
        assert!((r.m_matrix[(2, 2)] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn relaxation_sandwich_small() {
        for seed in 0..5 {
            let a = random_psd(10, 4, seed);
            let exact = exact_sparse_eigenvalue(&a, 3).unwrap().value;
            let settings = SdpSettings::with_tolerance(1e-9);
            let r = sdp_sparse_eigenvalue(&a, 3, &settings).unwrap();
            let lam = max_eigenvalue(&a);
            assert!(r.value >= exact - 1e-6, "{} < {exact}", r.value);
            assert!(r.value <= lam + 1e-6);
            assert!(r.value <= soft_threshold_bound(&a, 0.1, 3) + 1e-6);
            assert!(r.upper_bound >= r.value);
            let l1: f64 = r.m_matrix.iter().map(|v| v.abs()).sum();
            assert!(l1 <= 3.0 * (1.0 + 1e-6));
            assert!((r.m_matrix.trace() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lanczos_path_agrees_with_certificate() {
        // large enough for the partial eigensolver, low rank like a SIR matrix
        let a = random_psd(120, 10, 3);
        let r = sdp_sparse_eigenvalue(&a, 5, &SdpSettings::with_tolerance(1e-5)).unwrap();
        assert!(r.converged);
        let tight = sdp_sparse_eigenvalue(&a, 5, &SdpSettings::with_tolerance(1e-9)).unwrap();
        assert!(tight.gap() <= 1e-8 * tight.upper_bound);
        assert!(r.value <= tight.upper_bound + 1e-12);
        assert!(tight.value - r.value <= 1e-4 * tight.value);
        assert!(r.value <= max_eigenvalue(&a) + 1e-9);
        let min_eig = r.m_matrix.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-8);
    }

    #[test]
    fn unrestricted_when_ks_covers_p() {
        let a = random_psd(6, 3, 9);
        let r = sdp_sparse_eigenvalue(&a, 6, &SdpSettings::default()).unwrap();
        assert!((r.value - max_eigenvalue(&a)).abs() < 1e-12);
        let e = exact_sparse_eigenvalue(&a, 8).unwrap();
        assert_eq!(e.value, max_eigenvalue(&a));
    }

    #[test]
    fn soft_threshold_examples() {
        let a = random_psd(8, 3, 1);
        assert!((soft_threshold_bound(&a, 0.0, 3) - max_eigenvalue(&a)).abs() < 1e-12);
        let big = max_abs(&a);
        assert_eq!(soft_threshold_bound(&a, big, 3), 3.0 * big);
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let a = random_psd(12, 4, 2);
        let settings = SdpSettings { max_iterations: 3, ..SdpSettings::with_tolerance(1e-12) };
        match sdp_sparse_eigenvalue(&a, 2, &settings) {
            Err(SparseEigError::DidNotConverge(best)) => {
                assert!(!best.converged);
                let l1: f64 = best.m_matrix.iter().map(|v| v.abs()).sum();
                assert!(l1 <= 2.0 * (1.0 + 1e-9));
                assert!(best.value <= best.upper_bound);
            }
            other => panic!("expected DidNotConverge, got {other:?}"),
        }
    }

    #[test]
    fn tightest_threshold_brackets_relaxation() {
        let a = random_psd(30, 4, 5);
        let (bound, z) = tightest_soft_threshold(&a, 3);
        assert!(z >= 0.0);
        assert!((bound - soft_threshold_bound(&a, z, 3)).abs() < 1e-10);
        assert!(bound <= max_eigenvalue(&a) + 1e-10);
        let sdp = sdp_sparse_eigenvalue(&a, 3, &SdpSettings::with_tolerance(1e-8)).unwrap();
        assert!(sdp.value <= bound + 1e-8);
    }

    #[test]
    fn sphere_l1_output_is_feasible() {
        let y: Vec<f64> = (0..40).map(|i| ((i * 17 % 23) as f64 - 11.0) / 7.0).collect();
        let mut x = vec![0.0; 40];
        assert!(sphere_l1(&y, 2.0, &mut x));
        assert!((norm(&x) - 1.0).abs() < 1e-12);
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        assert!(l1 <= 2.0 + 1e-9 && l1 > 1.99);
        assert!(!sphere_l1(&[0.0; 3], 1.0, &mut x[..3]));
    }

    #[test]
    fn polish_finds_planted_support() {
        let mut a = DMatrix::<f64>::identity(20, 20) * 0.1;
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] += 1.0;
            }
        }
        let start: Vec<f64> = (0..20).map(|i| if i < 3 { 1.5 } else { 1.0 }).collect();
        let (value, x) = rank_one_polish(&a, &start, 3.0, 50).unwrap();
        assert!((value - 3.1).abs() < 1e-9);
        assert!(x[3..].iter().all(|v| v.abs() < 1e-9));
    }
}
