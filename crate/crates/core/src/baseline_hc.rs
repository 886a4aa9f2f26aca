//! Higher Criticism on marginal correlations.
//!
//! Each covariate gets `t_j = sum_i y_i x_ij / ||y||` and the two-sided
//! normal p-value `m_j = 2 Phi(-|t_j|)`. With the p-values sorted
//! ascending, the score is
//!
//! ```text
//! HC = max_{i : m_(i) <= 1/2} sqrt(p) (i/p - m_(i)) / sqrt(m_(i) (1 - m_(i)))
//! ```
//!
//! and `-inf` when no p-value is at most one half.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::Dataset;

#[derive(Debug, Error)]
pub enum HcError {
    #[error("response is identically zero")]
    DegenerateResponse,
    #[error("need n >= 2 and matching dimensions, got x {rows}x{cols} and y of length {len}")]
    Shape { rows: usize, cols: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcResult {
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    /// `-inf` (serialized as `null`) when no index is eligible.
    #[serde(with = "score_serde")]
    pub hc_score: f64,
    /// 1-based rank of the p-value attaining the maximum; 0 if none.
    pub threshold_index: usize,
}

mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Two-sided normal tail `2 Phi(-|t|)`.
pub fn two_sided_p_value(t: f64) -> f64 {
    libm::erfc(t.abs() / std::f64::consts::SQRT_2)
}

pub fn hc_statistic(data: &Dataset) -> Result<HcResult, HcError> {
    hc_statistic_xy(&data.x, data.y.as_slice())
}

pub fn hc_statistic_xy(x: &DMatrix<f64>, y: &[f64]) -> Result<HcResult, HcError> {
    let (n, p) = x.shape();
    if n < 2 || y.len() != n {
        return Err(HcError::Shape { rows: n, cols: p, len: y.len() });
    }
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ynorm == 0.0 {
        return Err(HcError::DegenerateResponse);
    }
    let t_stats: Vec<f64> = (0..p)
        .map(|j| x.column(j).iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / ynorm)
        .collect();
    let p_values: Vec<f64> = t_stats.iter().map(|&t| two_sided_p_value(t)).collect();
    let (hc_score, threshold_index) = hc_score(&p_values);
    Ok(HcResult { t_stats, p_values, hc_score, threshold_index })
}

/// The HC maximum over sorted p-values, with the 1-based index attaining it.
pub fn hc_score(p_values: &[f64]) -> (f64, usize) {
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p = sorted.len() as f64;
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &m) in sorted.iter().enumerate() {
        if m > 0.5 {
            break;
        }
        let m = m.max(f64::MIN_POSITIVE);
        let rank = (i + 1) as f64;
        let score = p.sqrt() * (rank / p - m) / (m * (1.0 - m)).sqrt();
        if score > best.0 {
            best = (score, i + 1);
        }
    }
    best
}

/// Rejects when the score strictly exceeds `c_hc`.
pub fn hc_test(data: &Dataset, c_hc: f64) -> Result<bool, HcError> {
    Ok(hc_statistic(data)?.hc_score > c_hc)
}
