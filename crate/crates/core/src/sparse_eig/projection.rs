//! Euclidean projections used by the splitting solver.

use nalgebra::DMatrix;

use crate::linalg::{dense_eigenpairs, lanczos, DenseSym, TopEigenpairs, DENSE_EIGEN_LIMIT};

/// Threshold `theta` with `sum_i max(v_i - theta, 0) = radius`, by sorting
/// and shifting.
pub fn simplex_threshold(v: &[f64], radius: f64) -> f64 {
    debug_assert!(radius > 0.0 && !v.is_empty());
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = sorted[0] - radius;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    theta
}

/// Projection onto `{w >= 0, sum w = radius}`.
pub fn project_simplex(v: &[f64], radius: f64) -> Vec<f64> {
    let theta = simplex_threshold(v, radius);
    v.iter().map(|&u| (u - theta).max(0.0)).collect()
}

/// Soft-threshold level that maps `v` onto the l1 ball of the given
/// radius; zero when `v` is already inside.
///
/// A few Michelot passes discard entries that are certainly zeroed before
/// the exact sort-and-shift step runs on the survivors.
pub fn l1_ball_threshold(v: &[f64], radius: f64) -> f64 {
    let total: f64 = v.iter().map(|u| u.abs()).sum();
    if total <= radius {
        return 0.0;
    }
    // entries at or below this lower bound on the threshold are zeroed
    let mut lower = (total - radius) / v.len() as f64;
    let mut candidates: Vec<f64> = v.iter().map(|u| u.abs()).filter(|&u| u > lower).collect();
    for _ in 0..8 {
        let sum: f64 = candidates.iter().sum();
        let next = (sum - radius) / candidates.len() as f64;
        if next <= lower || candidates.len() < 64 {
            break;
        }
        lower = next;
        candidates.retain(|&u| u > lower);
    }
    simplex_threshold(&candidates, radius).max(0.0)
}

/// Projects `v` in place onto the l1 ball of the given radius.
pub fn project_l1_ball(v: &mut [f64], radius: f64) {
    let theta = l1_ball_threshold(v, radius);
    if theta > 0.0 {
        for u in v.iter_mut() {
            *u = (u.abs() - theta).max(0.0).copysign(*u);
        }
    }
}

/// A spectahedron projection in factored form.
#[derive(Debug, Clone)]
pub struct SpectralProjection {
    /// Eigenvectors with positive projected weight, as columns.
    pub vectors: DMatrix<f64>,
    pub weights: Vec<f64>,
}

impl SpectralProjection {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    /// `V diag(w) V'`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, w) in self.weights.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*w);
        }
        scaled * self.vectors.transpose()
    }
}

/// Projection onto `{M psd, tr M = 1}` for a sequence of nearby matrices.
///
/// Only eigenvalues above the simplex threshold survive. For larger
/// matrices Lanczos runs from a combination of the previous call's Ritz
/// vectors until the pairs above the threshold have converged and the next
/// Ritz value, plus its residual, lies below it.
#[derive(Debug, Clone, Default)]
pub struct SpectahedronProjector {
    warm: Option<Vec<f64>>,
    rank: usize,
}

impl SpectahedronProjector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Projects `w`; `rel_tol` bounds the Ritz residuals relative to the
    /// largest Ritz value magnitude.
    pub fn project(&mut self, w: &DMatrix<f64>, rel_tol: f64) -> SpectralProjection {
        let p = w.nrows();
        let top = if p <= DENSE_EIGEN_LIMIT {
            dense_eigenpairs(w)
        } else {
            lanczos(&DenseSym(w), self.warm.as_deref(), 2 * self.rank + 8, |values, residuals| {
                let theta = simplex_threshold(values, 1.0);
                let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
                let tol = rel_tol * scale;
                let r = values.iter().take_while(|&&v| v > theta).count();
                if r == values.len() || residuals[..r].iter().any(|&e| e > tol) {
                    return None;
                }
                (values[r] + residuals[r] <= theta || residuals[r] <= tol).then_some(r)
            })
        };
        let proj = assemble(&top);
        self.rank = proj.rank();
        if p > DENSE_EIGEN_LIMIT {
            let mut start = vec![0.0; p];
            for j in 0..proj.rank() {
                for (s, v) in start.iter_mut().zip(proj.vectors.column(j).iter()) {
                    *s += v;
                }
            }
            self.warm = Some(start);
        }
        proj
    }
}

/// One-off projection onto `{M psd, tr M = 1}`.
pub fn project_spectahedron(w: &DMatrix<f64>) -> DMatrix<f64> {
    SpectahedronProjector::new().project(w, 1e-10).matrix()
}

fn assemble(top: &TopEigenpairs) -> SpectralProjection {
    let p = top.vectors.nrows();
    let theta = simplex_threshold(&top.values, 1.0);
    let keep: Vec<usize> = (0..top.values.len()).filter(|&i| top.values[i] > theta).collect();
    let weights: Vec<f64> = keep.iter().map(|&i| top.values[i] - theta).collect();
    let vectors = DMatrix::from_fn(p, keep.len(), |r, c| top.vectors[(r, keep[c])]);
    SpectralProjection { vectors, weights }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_l1(v: &[f64], radius: f64) -> Vec<f64> {
        // bisection on the threshold
        let (mut lo, mut hi) = (0.0, v.iter().fold(0.0f64, |a, u| a.max(u.abs())));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|u| (u.abs() - mid).max(0.0)).sum();
            if s > radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        v.iter().map(|u| (u.abs() - hi).max(0.0).copysign(*u)).collect()
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_simplex(&[0.5, 0.5], 1.0), vec![0.5, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0], 1.0), vec![1.0, 0.0]);
        let w = project_simplex(&[0.1, 0.2, 0.3], 1.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[2] - w[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn l1_projection_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for len in [3usize, 50, 5000] {
            let v: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let radius = 0.1 * len as f64 / 4.0;
            let mut got = v.clone();
            project_l1_ball(&mut got, radius);
            let want = brute_l1(&v, radius);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
            assert!(got.iter().map(|u| u.abs()).sum::<f64>() <= radius * (1.0 + 1e-12));
        }
    }

    #[test]
    fn l1_projection_keeps_interior_points() {
        let mut v = vec![0.1, -0.2, 0.3];
        project_l1_ball(&mut v, 1.0);
        assert_eq!(v, vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn spectahedron_lanczos_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = 150;
        let g = DMatrix::from_fn(p, 6, |_, _| rng.gen::<f64>() - 0.5);
        let mut w = &g * g.transpose() * 0.3;
        for i in 0..p {
            w[(i, i)] += rng.gen::<f64>() * 0.01;
        }
        let mut projector = SpectahedronProjector::new();
        let dense = assemble(&dense_eigenpairs(&w)).matrix();
        let fast = projector.project(&w, 1e-11).matrix();
        assert!((&fast - &dense).norm() < 1e-8);
        assert!((fast.trace() - 1.0).abs() < 1e-10);
        // warm start on a perturbed matrix
        w[(3, 3)] += 0.01;
        let dense = assemble(&dense_eigenpairs(&w)).matrix();
        let fast = projector.project(&w, 1e-11).matrix();
        assert!((&fast - &dense).norm() < 1e-8);
    }
}
