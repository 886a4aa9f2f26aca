//! Sliced inverse regression.
//!
//! Observations are sorted by the response and cut into `H` contiguous
//! slices. The centered covariate means of the slices form the columns of
//! `X_H`, and the SIR matrix is `(1/H) X_H X_H'`. Its nonzero spectrum is
//! that of the `H x H` Gram matrix `(1/H) X_H' X_H`, which is what
//! [`SlicedSummary::top_eigenvalue`] uses.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{validate_xy, Dataset, ModelError};

pub const DEFAULT_SLICES: usize = 10;
pub const MAX_SLICES: usize = 64;
/// Share of tied responses above which a warning is raised.
pub const TIE_WARNING_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum SirError {
    #[error("need at least 2H = {needed} observations, got {n}")]
    TooFewObservations { n: usize, needed: usize },
    #[error("slice count must be in 2..={MAX_SLICES}, got {0}")]
    InvalidSliceCount(usize),
    #[error("beta must be nonzero")]
    ZeroBeta,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Data(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Slice means of the centered covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedSummary {
    /// `p x H`; column `h` is the mean of centered `x` over slice `h`.
    pub slice_means: DMatrix<f64>,
    pub slice_sizes: Vec<usize>,
    /// Fraction of observations whose response equals that of another one.
    pub tie_fraction: f64,
}

impl SlicedSummary {
    pub fn h(&self) -> usize {
        self.slice_sizes.len()
    }

    pub fn p(&self) -> usize {
        self.slice_means.nrows()
    }

    pub fn n(&self) -> usize {
        self.slice_sizes.iter().sum()
    }

    /// True when more than 10% of the responses are tied.
    pub fn ties_warning(&self) -> bool {
        self.tie_fraction > TIE_WARNING_FRACTION
    }

    /// The `H x H` matrix `(1/H) X_H' X_H`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = self.slice_means.tr_mul(&self.slice_means);
        g /= self.h() as f64;
        g
    }

    /// The `p x p` SIR matrix `(1/H) X_H X_H'`.
    pub fn lambda_hat(&self) -> DMatrix<f64> {
        let mut a = &self.slice_means * self.slice_means.transpose();
        a /= self.h() as f64;
        // exact symmetry regardless of summation order
        for i in 0..a.nrows() {
            for j in 0..i {
                let v = 0.5 * (a[(i, j)] + a[(j, i)]);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    /// `lambda_max` of the SIR matrix, computed on the Gram form.
    pub fn top_eigenvalue(&self) -> f64 {
        let g = self.gram();
        g.symmetric_eigenvalues().max().max(0.0)
    }

    /// Writes `slice,size,x1..xp` with one row per slice.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), SirError> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "slice,size")?;
        for j in 1..=self.p() {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for h in 0..self.h() {
            write!(w, "{},{}", h + 1, self.slice_sizes[h])?;
            for j in 0..self.p() {
                write!(w, ",{:.16e}", self.slice_means[(j, h)])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sizes of `h` slices over `n` observations: `floor(n/h)` each, with the
/// remainder given one apiece to the last slices.
pub fn slice_sizes(n: usize, h: usize) -> Vec<usize> {
    let c = n / h;
    let r = n % h;
    (0..h).map(|k| if k >= h - r { c + 1 } else { c }).collect()
}

pub fn check_slices(n: usize, h: usize) -> Result<(), SirError> {
    if !(2..=MAX_SLICES).contains(&h) {
        return Err(SirError::InvalidSliceCount(h));
    }
    if n < 2 * h {
        return Err(SirError::TooFewObservations { n, needed: 2 * h });
    }
    Ok(())
}

/// Stable order of the observations by response.
pub(crate) fn response_order(y: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    order
}

fn tie_fraction(y: &[f64], order: &[usize]) -> f64 {
    let n = order.len();
    let mut tied = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && y[order[j]] == y[order[i]] {
            j += 1;
        }
        if j - i > 1 {
            tied += j - i;
        }
        i = j;
    }
    tied as f64 / n as f64
}

/// Slices a dataset into `h` groups by the ordered response.
pub fn slice(data: &Dataset, h: usize) -> Result<SlicedSummary, SirError> {
    slice_xy(&data.x, data.y.as_slice(), h)
}

pub fn slice_xy(x: &DMatrix<f64>, y: &[f64], h: usize) -> Result<SlicedSummary, SirError> {
    validate_xy(x, &DVector::from_column_slice(y))?;
    let (n, p) = x.shape();
    check_slices(n, h)?;
    let order = response_order(y);
    let ties = tie_fraction(y, &order);
    if ties > TIE_WARNING_FRACTION {
        log::warn!("{:.1}% of responses are tied; ties are broken by observation index", 100.0 * ties);
    }
    let sizes = slice_sizes(n, h);

    // slice sums accumulated in sorted order, so the result only depends on
    // the ranking and not on the row order of the input
    let mut sums = DMatrix::zeros(p, h);
    let mut start = 0;
    for (k, &size) in sizes.iter().enumerate() {
        let mut col = sums.column_mut(k);
        for &i in &order[start..start + size] {
            for j in 0..p {
                col[j] += x[(i, j)];
            }
        }
        start += size;
    }
    let mut grand = DVector::zeros(p);
    for k in 0..h {
        grand += sums.column(k);
    }
    grand /= n as f64;
    let mut means = sums;
    for (k, &size) in sizes.iter().enumerate() {
        let mut col = means.column_mut(k);
        col /= size as f64;
        col -= &grand;
    }
    Ok(SlicedSummary { slice_means: means, slice_sizes: sizes, tie_fraction: ties })
}

/// `lambda_max` of the SIR matrix of a dataset.
pub fn top_eigenvalue(data: &Dataset, h: usize) -> Result<f64, SirError> {
    Ok(slice(data, h)?.top_eigenvalue())
}

/// Closed-form gSNR of the linear model `y = x'beta + eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsnrOracle {
    pub lambda: f64,
}

pub fn gsnr_linear(beta: &DVector<f64>, sigma: &DMatrix<f64>, sigma_eps: f64) -> Result<GsnrOracle, SirError> {
    if sigma.nrows() != beta.len() || sigma.ncols() != beta.len() {
        return Err(SirError::DimensionMismatch(format!(
            "beta has length {} but sigma is {}x{}",
            beta.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let norm2 = beta.norm_squared();
    if norm2 == 0.0 {
        return Err(SirError::ZeroBeta);
    }
    let b0 = beta / norm2.sqrt();
    let sb = sigma * &b0;
    let num = sb.norm_squared() * norm2;
    let den = b0.dot(&sb) * norm2 + sigma_eps * sigma_eps;
    Ok(GsnrOracle { lambda: num / den })
}
