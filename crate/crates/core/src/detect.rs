//! Test statistics, decision rules and Monte-Carlo calibration.
//!
//! Three statistics are computed from a dataset:
//!
//! * `lambda_max`, the top eigenvalue of the SIR matrix (test `psi1`);
//! * `sparse_eig`, its restricted eigenvalue over `ks`-sparse directions,
//!   exact or through the SDP relaxation (test `psi2`);
//! * `anova_t = mean(y^2) - 1` (test `psi3`).
//!
//! SSS rejects when `psi1` or `psi2` does, and SSSa when SSS or `psi3` does.
//! Thresholds are empirical quantiles of the same statistics on null
//! responses `z ~ N(0, I_n)`, either redrawn against the dataset's own
//! covariates ([`calibrate`]) or pooled across an experiment
//! ([`thresholds_from_draws`]).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline_hc::{self, HcError};
use crate::exec::Execution;
use crate::models::{Dataset, ModelError};
use crate::sir::{self, SirError, DEFAULT_SLICES};
use crate::sparse_eig::{self, enumeration_feasible, SdpSettings, SdpSummary, SparseEigError};

/// Smallest admissible number of null draws.
pub const MIN_NULL_DRAWS: usize = 20;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Sir(#[from] SirError),
    #[error(transparent)]
    SparseEig(#[from] SparseEigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hc(#[from] HcError),
    #[error("thresholds do not match the dataset: {0}")]
    ThresholdMismatch(String),
    #[error("invalid test configuration: {0}")]
    InvalidConfig(String),
}

/// How the restricted eigenvalue is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMode {
    /// Exact when at most `10^6` supports need visiting, SDP otherwise.
    #[default]
    Auto,
    Exact,
    Sdp,
}

/// The method actually used for a given `(p, ks)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedMode {
    Exact,
    Sdp,
}

impl EigenMode {
    pub fn resolve(self, p: usize, ks: usize) -> Result<ResolvedMode, DetectError> {
        match self {
            EigenMode::Sdp => Ok(ResolvedMode::Sdp),
            EigenMode::Exact if enumeration_feasible(p, ks) => Ok(ResolvedMode::Exact),
            EigenMode::Exact => Err(SparseEigError::EnumerationTooLarge { p, ks }.into()),
            EigenMode::Auto if enumeration_feasible(p, ks) => Ok(ResolvedMode::Exact),
            EigenMode::Auto => Ok(ResolvedMode::Sdp),
        }
    }
}

/// Form of the `psi1` comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psi1Form {
    /// `lambda_max > tau_n`, with `tau_n` a quantile of null `lambda_max`.
    #[default]
    Calibrated,
    /// `lambda_max > tr(Sigma_hat)/n + tau_n`, with `tau_n` a quantile of
    /// null `lambda_max - tr(Sigma_hat)/n`.
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Null responses redrawn against the tested covariates.
    #[default]
    PerDataset,
    /// One null draw per replication, pooled over an experiment cell.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    /// Number of slices `H`.
    pub h: usize,
    /// Sparsity of the restricted eigenvalue.
    pub ks: usize,
    pub mode: EigenMode,
    pub sdp: SdpSettings,
    pub level: f64,
    pub n_null: usize,
    /// Calibrate `psi1` and `psi2` at `level / 2` each.
    pub bonferroni: bool,
    pub psi1: Psi1Form,
    /// Stop the SDP once its certified interval settles the `psi2` decision.
    pub settle_early: bool,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            h: DEFAULT_SLICES,
            ks: 1,
            mode: EigenMode::Auto,
            sdp: SdpSettings::with_tolerance(1e-4),
            level: 0.05,
            n_null: 100,
            bonferroni: false,
            psi1: Psi1Form::Calibrated,
            settle_early: true,
        }
    }
}

impl TestConfig {
    pub fn new(ks: usize) -> Self {
        Self { ks, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::InvalidConfig(m));
        if self.ks == 0 {
            return bad("ks must be at least 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must be in (0, 1), got {}", self.level));
        }
        if self.n_null < MIN_NULL_DRAWS {
            return bad(format!("need at least {MIN_NULL_DRAWS} null draws, got {}", self.n_null));
        }
        sir::check_slices(2 * self.h, self.h)?;
        self.sdp.validate()?;
        Ok(())
    }

    /// Levels used for `psi1`/`psi2` and for `psi3`/HC.
    fn levels(&self) -> (f64, f64) {
        if self.bonferroni {
            (self.level / 2.0, self.level)
        } else {
            (self.level, self.level)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatistics {
    pub lambda_max: f64,
    pub sparse_eig: f64,
    pub sparse_mode: ResolvedMode,
    /// Solver diagnostics when `sparse_mode` is SDP.
    pub sdp: Option<SdpSummary>,
    pub anova_t: f64,
    /// `tr(Sigma_hat) / n` for the sample covariance `Sigma_hat`.
    pub trace_term: f64,
    pub ties_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThresholds {
    pub tau_n: f64,
    pub tau_n_prime: f64,
    pub tau_n_dprime: f64,
    pub c_hc: f64,
    pub level: f64,
    pub n_null: usize,
    pub mode: CalibrationMode,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub h: usize,
    pub ks: usize,
    pub sparse_mode: ResolvedMode,
    pub psi1: Psi1Form,
    pub bonferroni: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistics: TestStatistics,
    pub thresholds: CalibratedThresholds,
    pub reject_psi1: bool,
    pub reject_psi2: bool,
    pub reject_psi3: bool,
    pub reject_sss: bool,
    pub reject_sssa: bool,
}

/// Statistics of one null response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullDraw {
    pub lambda_max: f64,
    pub sparse_eig: f64,
    pub anova_t: f64,
    pub trace_term: f64,
    /// `None` when no HC index is eligible.
    pub hc: Option<f64>,
}

/// `k`-th smallest value with `k = ceil((1 - level) N)`.
pub fn empirical_quantile(values: &[f64], level: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = (((1.0 - level) * n as f64) - 1e-9).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

pub fn anova_statistic(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64 - 1.0
}

/// `tr(Sigma_hat) / n` with the unbiased sample covariance.
pub fn trace_term(x: &DMatrix<f64>) -> f64 {
    let (n, p) = x.shape();
    let mut total = 0.0;
    for j in 0..p {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    }
    total / n as f64
}

fn sparse_statistic(
    a: &DMatrix<f64>,
    cfg: &TestConfig,
    mode: ResolvedMode,
    settle_at: Option<f64>,
) -> Result<(f64, Option<SdpSummary>), DetectError> {
    match mode {
        ResolvedMode::Exact => Ok((sparse_eig::exact_sparse_eigenvalue(a, cfg.ks)?.value, None)),
        ResolvedMode::Sdp => {
            let r = match settle_at {
                Some(t) => sparse_eig::sdp_decide(a, cfg.ks, &cfg.sdp, t),
                None => sparse_eig::sdp_sparse_eigenvalue(a, cfg.ks, &cfg.sdp),
            };
            let r = match r {
                Err(SparseEigError::DidNotConverge(best)) => {
                    log::warn!(
                        "SDP stopped after {} iterations with gap {:.3e}; using its best feasible point",
                        best.iterations,
                        best.gap()
                    );
                    *best
                }
                other => other?,
            };
            Ok((r.value, Some(r.summary())))
        }
    }
}

fn statistics_xy(
    x: &DMatrix<f64>,
    y: &[f64],
    cfg: &TestConfig,
    settle_at: Option<f64>,
) -> Result<TestStatistics, DetectError> {
    let p = x.ncols();
    if cfg.ks >= p {
        return Err(DetectError::InvalidConfig(format!("need ks < p, got ks = {} and p = {p}", cfg.ks)));
    }
    let mode = cfg.mode.resolve(p, cfg.ks)?;
    let summary = sir::slice_xy(x, y, cfg.h)?;
    let lambda_max = summary.top_eigenvalue();
    let (sparse_eig, sdp) = sparse_statistic(&summary.lambda_hat(), cfg, mode, settle_at)?;
    Ok(TestStatistics {
        lambda_max,
        sparse_eig,
        sparse_mode: mode,
        sdp,
        anova_t: anova_statistic(y),
        trace_term: trace_term(x),
        ties_warning: summary.ties_warning(),
    })
}

/// All three statistics, with the restricted eigenvalue solved to the
/// configured tolerance.
pub fn compute_statistics(data: &Dataset, cfg: &TestConfig) -> Result<TestStatistics, DetectError> {
    statistics_xy(&data.x, data.y.as_slice(), cfg, None)
}

/// Statistics of the response `z` against covariates `x`, HC included.
pub fn null_draw(x: &DMatrix<f64>, z: &[f64], cfg: &TestConfig) -> Result<NullDraw, DetectError> {
    let s = statistics_xy(x, z, cfg, None)?;
    let hc = baseline_hc::hc_statistic_xy(x, z)?.hc_score;
    Ok(NullDraw {
        lambda_max: s.lambda_max,
        sparse_eig: s.sparse_eig,
        anova_t: s.anova_t,
        trace_term: s.trace_term,
        hc: hc.is_finite().then_some(hc),
    })
}

/// A standard normal response vector from its own stream of `seed`.
pub fn null_response(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Thresholds from a collection of null draws.
pub fn thresholds_from_draws(
    draws: &[NullDraw],
    cfg: &TestConfig,
    mode: CalibrationMode,
    seed: u64,
    n: usize,
    p: usize,
) -> Result<CalibratedThresholds, DetectError> {
    cfg.validate()?;
    if draws.len() < MIN_NULL_DRAWS {
        return Err(DetectError::InvalidConfig(format!(
            "need at least {MIN_NULL_DRAWS} null draws, got {}",
            draws.len()
        )));
    }
    let (spectral, other) = cfg.levels();
    let psi1: Vec<f64> = match cfg.psi1 {
        Psi1Form::Calibrated => draws.iter().map(|d| d.lambda_max).collect(),
        Psi1Form::Theory => draws.iter().map(|d| d.lambda_max - d.trace_term).collect(),
    };
    let sparse: Vec<f64> = draws.iter().map(|d| d.sparse_eig).collect();
    let anova: Vec<f64> = draws.iter().map(|d| d.anova_t).collect();
    let hc: Vec<f64> = draws.iter().map(|d| d.hc.unwrap_or(f64::NEG_INFINITY)).collect();
    let t = CalibratedThresholds {
        tau_n: empirical_quantile(&psi1, spectral),
        tau_n_prime: empirical_quantile(&sparse, spectral),
        tau_n_dprime: empirical_quantile(&anova, other),
        c_hc: empirical_quantile(&hc, other),
        level: cfg.level,
        n_null: draws.len(),
        mode,
        seed,
        n,
        p,
        h: cfg.h,
        ks: cfg.ks,
        sparse_mode: cfg.mode.resolve(p, cfg.ks)?,
        psi1: cfg.psi1,
        bonferroni: cfg.bonferroni,
    };
    let finite = [t.tau_n, t.tau_n_prime, t.tau_n_dprime].iter().all(|v| v.is_finite());
    if !finite {
        return Err(DetectError::InvalidConfig("calibration produced non-finite thresholds".into()));
    }
    Ok(t)
}

/// Calibrates against the covariates `x` with `cfg.n_null` fresh null
/// responses; draw `i` uses stream `i` of `seed`.
pub fn calibrate(x: &DMatrix<f64>, cfg: &TestConfig, seed: u64, exec: &Execution) -> Result<CalibratedThresholds, DetectError> {
    cfg.validate()?;
    let (n, p) = x.shape();
    let draws: Vec<NullDraw> = exec
        .map(cfg.n_null, |i| null_draw(x, &null_response(n, seed, i as u64), cfg))
        .into_iter()
        .collect::<Result<_, _>>()?;
    thresholds_from_draws(&draws, cfg, CalibrationMode::PerDataset, seed, n, p)
}

fn check_match(data: &Dataset, t: &CalibratedThresholds, cfg: &TestConfig) -> Result<(), DetectError> {
    let mut problems = Vec::new();
    if t.n != data.n() {
        problems.push(format!("n = {} vs {}", data.n(), t.n));
    }
    if t.p != data.p() {
        problems.push(format!("p = {} vs {}", data.p(), t.p));
    }
    if t.h != cfg.h {
        problems.push(format!("H = {} vs {}", cfg.h, t.h));
    }
    if t.ks != cfg.ks {
        problems.push(format!("ks = {} vs {}", cfg.ks, t.ks));
    }
    if t.psi1 != cfg.psi1 {
        problems.push("psi1 form differs".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(DetectError::ThresholdMismatch(problems.join(", ")))
    }
}

/// Applies the decision rules with calibrated thresholds.
pub fn run_test(data: &Dataset, thresholds: &CalibratedThresholds, cfg: &TestConfig) -> Result<TestOutcome, DetectError> {
    check_match(data, thresholds, cfg)?;
    let mut cfg = *cfg;
    cfg.mode = match thresholds.sparse_mode {
        ResolvedMode::Exact => EigenMode::Exact,
        ResolvedMode::Sdp => EigenMode::Sdp,
    };
    let settle = cfg.settle_early.then_some(thresholds.tau_n_prime);
    let statistics = statistics_xy(&data.x, data.y.as_slice(), &cfg, settle)?;
    Ok(decide(statistics, thresholds.clone()))
}

/// Decision flags for given statistics and thresholds.
pub fn decide(statistics: TestStatistics, thresholds: CalibratedThresholds) -> TestOutcome {
    let reject_psi1 = match thresholds.psi1 {
        Psi1Form::Calibrated => statistics.lambda_max > thresholds.tau_n,
        Psi1Form::Theory => statistics.lambda_max > statistics.trace_term + thresholds.tau_n,
    };
    let reject_psi2 = statistics.sparse_eig > thresholds.tau_n_prime;
    let reject_psi3 = statistics.anova_t > thresholds.tau_n_dprime;
    let reject_sss = reject_psi1 || reject_psi2;
    TestOutcome {
        statistics,
        thresholds,
        reject_psi1,
        reject_psi2,
        reject_psi3,
        reject_sss,
        reject_sssa: reject_sss || reject_psi3,
    }
}
