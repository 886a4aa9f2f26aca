//! Symmetric eigenvalue helpers.
//!
//! Small problems go through nalgebra's dense symmetric QR. Large ones use a
//! Lanczos iteration with full reorthogonalization, which only needs
//! matrix-vector products and converges quickly for the few extreme
//! eigenpairs the callers ask for.

use nalgebra::{DMatrix, SymmetricEigen};

/// Orders at or below this use the dense eigensolver.
pub(crate) const DENSE_EIGEN_LIMIT: usize = 48;

/// Relative residual accepted for a converged Ritz pair.
pub(crate) const LANCZOS_TOL: f64 = 1e-11;

/// A symmetric linear operator that can be applied to a vector.
pub(crate) trait SymOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

/// Dense symmetric matrix stored column-major.
pub(crate) struct DenseSym<'a>(pub &'a DMatrix<f64>);

impl SymOperator for DenseSym<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let p = self.0.nrows();
        let data = self.0.as_slice();
        // column i equals row i by symmetry, and columns are contiguous
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&data[i * p..(i + 1) * p], x);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Deterministic, well-spread filler used for Lanczos start vectors and
/// restarts. Reproducibility matters more than statistical quality here.
pub(crate) fn pseudo_random_fill(out: &mut [f64], salt: u64) {
    let mut state = 0x9E37_79B9_7F4A_7C15u64 ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    for v in out.iter_mut() {
        state ^= state >> 30;
        state = state.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        state ^= state >> 27;
        state = state.wrapping_mul(0x94D0_49BB_1331_11EB);
        state ^= state >> 31;
        *v = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
    }
}

/// Eigenvalues sorted in descending order together with their eigenvectors
/// (one per column).
#[derive(Debug, Clone)]
pub(crate) struct TopEigenpairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// All eigenpairs of a dense symmetric matrix, descending.
pub(crate) fn dense_eigenpairs(a: &DMatrix<f64>) -> TopEigenpairs {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    TopEigenpairs { values, vectors }
}

/// Largest eigenvalue of a symmetric matrix.
pub(crate) fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let p = a.nrows();
    if p == 0 {
        return f64::NEG_INFINITY;
    }
    if p <= DENSE_EIGEN_LIMIT {
        a.clone().symmetric_eigenvalues().max()
    } else {
        lanczos_top(&DenseSym(a), 1, None, LANCZOS_TOL).values[0]
    }
}

/// Largest eigenpair of a symmetric matrix, with an optional start vector.
pub(crate) fn max_eigenpair(a: &DMatrix<f64>, start: Option<&[f64]>) -> (f64, Vec<f64>) {
    let p = a.nrows();
    let top = if p <= DENSE_EIGEN_LIMIT {
        dense_eigenpairs(a)
    } else {
        lanczos_top(&DenseSym(a), 1, start, LANCZOS_TOL)
    };
    (top.values[0], top.vectors.column(0).iter().copied().collect())
}

/// The `want` algebraically largest eigenpairs of `op` by Lanczos with full
/// reorthogonalization. The Krylov space is grown until every requested
/// Ritz pair has residual at most `rel_tol` times the largest Ritz value
/// magnitude, or the whole space is spanned.
pub(crate) fn lanczos_top(
    op: &impl SymOperator,
    want: usize,
    start: Option<&[f64]>,
    rel_tol: f64,
) -> TopEigenpairs {
    let want = want.clamp(1, op.dim().max(1));
    let first = (2 * want + 20).max(30);
    lanczos(op, start, first, |values, residuals| {
        if values.len() < want {
            return None;
        }
        let k = want;
        let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
        residuals[..k].iter().all(|r| *r <= rel_tol * scale).then_some(k)
    })
}

/// Lanczos with full reorthogonalization and a caller-chosen stopping rule.
///
/// After `first_check` steps, and then at growing intervals, `decide` sees
/// the Ritz values (descending) with their residual norms and either returns
/// how many leading pairs to keep or asks for more steps. Once the Krylov
/// space is exhausted the residuals are zero.
pub(crate) fn lanczos<F>(op: &impl SymOperator, start: Option<&[f64]>, first_check: usize, mut decide: F) -> TopEigenpairs
where
    F: FnMut(&[f64], &[f64]) -> Option<usize>,
{
    let n = op.dim();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    // beta[j] couples basis[j] and basis[j + 1]
    let mut beta: Vec<f64> = Vec::new();

    let mut q = vec![0.0; n];
    match start {
        Some(s) if s.len() == n && norm(s) > 0.0 => q.copy_from_slice(s),
        _ => pseudo_random_fill(&mut q, n as u64),
    }
    let nq = norm(&q);
    q.iter_mut().for_each(|v| *v /= nq);
    basis.push(q);

    let mut target = n.min(first_check.max(1));
    let mut w = vec![0.0; n];
    let mut anorm = 0.0f64;
    let mut restarts = 0u64;
    let mut exhausted = false;

    loop {
        while alpha.len() < target && !exhausted {
            let j = alpha.len();
            op.apply(&basis[j], &mut w);
            let a_j = dot(&basis[j], &w);
            alpha.push(a_j);
            axpy(-a_j, &basis[j], &mut w);
            if j > 0 {
                axpy(-beta[j - 1], &basis[j - 1], &mut w);
            }
            // two passes of classical Gram-Schmidt keep the basis orthogonal
            for _ in 0..2 {
                for qk in &basis {
                    let c = dot(qk, &w);
                    axpy(-c, qk, &mut w);
                }
            }
            anorm = anorm.max(a_j.abs()).max(norm(&w));
            if basis.len() == n {
                beta.push(0.0);
                exhausted = true;
                break;
            }
            let b = norm(&w);
            if b > 1e-13 * anorm.max(f64::MIN_POSITIVE) {
                beta.push(b);
                basis.push(w.iter().map(|v| v / b).collect());
            } else {
                // invariant subspace found; continue with a fresh direction
                beta.push(0.0);
                let mut fresh = vec![0.0; n];
                let mut ok = false;
                for _ in 0..4 {
                    restarts += 1;
                    pseudo_random_fill(&mut fresh, n as u64 + 7919 * restarts);
                    for _ in 0..2 {
                        for qk in &basis {
                            let c = dot(qk, &fresh);
                            axpy(-c, qk, &mut fresh);
                        }
                    }
                    let nf = norm(&fresh);
                    if nf > 1e-8 {
                        fresh.iter_mut().for_each(|v| *v /= nf);
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    exhausted = true;
                    break;
                }
                basis.push(fresh.clone());
            }
        }

        let m = alpha.len();
        let t = DMatrix::from_fn(m, m, |r, c| {
            if r == c {
                alpha[r]
            } else if r + 1 == c {
                beta[r]
            } else if c + 1 == r {
                beta[c]
            } else {
                0.0
            }
        });
        let ritz = dense_eigenpairs(&t);
        let last_beta = if exhausted { 0.0 } else { beta[m - 1] };
        let residuals: Vec<f64> = (0..m).map(|i| (last_beta * ritz.vectors[(m - 1, i)]).abs()).collect();
        let keep = match decide(&ritz.values, &residuals) {
            Some(k) => Some(k),
            None if exhausted || m >= n => Some(m),
            None => None,
        };
        if let Some(k) = keep {
            let k = k.min(m);
            let mut vectors = DMatrix::zeros(n, k);
            for i in 0..k {
                let mut col = vectors.column_mut(i);
                for (jj, qj) in basis.iter().take(m).enumerate() {
                    let coef = ritz.vectors[(jj, i)];
                    if coef != 0.0 {
                        for (c, qv) in col.iter_mut().zip(qj) {
                            *c += coef * qv;
                        }
                    }
                }
            }
            return TopEigenpairs { values: ritz.values[..k].to_vec(), vectors };
        }
        target = n.min(m + (m / 2).max(10));
    }
}
