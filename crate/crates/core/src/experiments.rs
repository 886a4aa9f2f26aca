//! Seeded power studies.
//!
//! An [`ExperimentConfig`] describes a base model and covariance plus a list
//! of sweeps; their cartesian product gives the cells. Every replication of
//! cell `c` draws from its own stream `(c << 32) | r` of a ChaCha8 generator
//! keyed by the master seed, so results do not depend on scheduling or on
//! the number of workers.
//!
//! Calibration follows one of three schemes:
//!
//! * `per_dataset`: every dataset gets `n_null` fresh null responses
//!   against its own covariates;
//! * `pooled`: every dataset gets one null response against its own
//!   covariates, and the quantiles are taken over the cell;
//! * `pooled` with `share_null_pool`: as above, but cells whose null
//!   distribution is the same (same `n`, covariance, support, `H`, `ks`)
//!   share one pool drawn from separate streams.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline_hc;
use crate::detect::{
    self, CalibratedThresholds, CalibrationMode, DetectError, EigenMode, NullDraw, Psi1Form, TestConfig, TestOutcome,
};
use crate::exec::Execution;
use crate::models::{self, CovarianceKind, CovarianceSpec, Dataset, GaussianDesign, Link, ModelSpec, SupportRule};
use crate::sir::DEFAULT_SLICES;
use crate::sparse_eig::SdpSettings;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn config_error<T>(msg: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::Config(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sss,
    Sssa,
    Hc,
    Psi1,
    Psi2,
    Psi3,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Sss => "sss",
            Method::Sssa => "sssa",
            Method::Hc => "hc",
            Method::Psi1 => "psi1",
            Method::Psi2 => "psi2",
            Method::Psi3 => "psi3",
        }
    }
}

/// Model part of a config; `link` takes `null`, `I`..`VII` or `cubic<k>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub link: String,
    /// Defaults to the link's customary support size.
    pub s: Option<usize>,
    #[serde(default)]
    pub support: SupportRule,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_sigma")]
    pub sigma_eps: f64,
    #[serde(default)]
    pub normalize_beta: bool,
}

fn default_kappa() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn to_spec(&self) -> Result<ModelSpec, ExperimentError> {
        let Some(link) = Link::parse(&self.link) else {
            return config_error(format!("unknown link '{}'", self.link));
        };
        Ok(ModelSpec {
            link,
            s: self.s.unwrap_or(link.default_sparsity()),
            support: self.support,
            kappa: self.kappa,
            sigma_eps: self.sigma_eps,
            normalize_beta: self.normalize_beta,
        })
    }
}

/// Covariance part of a config: `type` is `identity`, `i` (Toeplitz) or
/// `ii` (blocked by support).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_cross")]
    pub cross: f64,
}

fn default_cross() -> f64 {
    0.1
}

fn cov_kind(kind: &str, rho: f64, cross: f64) -> Result<CovarianceKind, ExperimentError> {
    Ok(match kind.to_ascii_lowercase().as_str() {
        "identity" => CovarianceKind::Identity,
        "i" | "toeplitz" => CovarianceKind::ToeplitzAr { rho },
        "ii" | "blocked" => CovarianceKind::BlockedBySupport { rho, cross },
        other => return config_error(format!("unknown covariance type '{other}'")),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Text(String),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Text(s) => f.write_str(s),
        }
    }
}

/// One swept parameter: `model`, `p`, `n`, `rho`, `cov` (as `type:rho`),
/// `kappa`, `s` or `sigma_eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: String,
    pub values: Vec<SweepValue>,
}

const SWEEP_PARAMETERS: [&str; 8] = ["model", "p", "n", "rho", "cov", "kappa", "s", "sigma_eps"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Drops cells with `p > 1000` and caps replications at 50 for `p >= 1000`.
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub model: ModelConfig,
    pub cov: CovConfig,
    pub n: usize,
    pub p: usize,
    pub replications: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_h")]
    pub h: usize,
    /// Multiplier of the support size in `ks = k s`.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Overrides `k s`; needed for the null model.
    pub ks: Option<usize>,
    #[serde(default = "default_calibration")]
    pub calibration_mode: CalibrationMode,
    #[serde(default = "default_n_null")]
    pub n_null: usize,
    #[serde(default)]
    pub share_null_pool: bool,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub sweep: Vec<Sweep>,
    pub master_seed: u64,
    #[serde(default = "default_eigen_mode")]
    pub eigen_mode: EigenMode,
    #[serde(default = "default_sdp")]
    pub sdp: SdpSettings,
    /// Stop SDP solves on the tested data once the decision is certain.
    #[serde(default = "default_true")]
    pub settle_early: bool,
    /// Draw beta once per cell instead of once per replication.
    #[serde(default)]
    pub fix_beta: bool,
    #[serde(default)]
    pub bonferroni: bool,
    #[serde(default)]
    pub psi1: Psi1Form,
}

fn default_level() -> f64 {
    0.05
}
fn default_h() -> usize {
    DEFAULT_SLICES
}
fn default_k() -> usize {
    1
}
fn default_calibration() -> CalibrationMode {
    CalibrationMode::Pooled
}
fn default_n_null() -> usize {
    100
}
fn default_methods() -> Vec<Method> {
    vec![Method::Sss, Method::Sssa, Method::Hc]
}
fn default_eigen_mode() -> EigenMode {
    EigenMode::Sdp
}
fn default_sdp() -> SdpSettings {
    SdpSettings::with_tolerance(1e-3)
}
fn default_true() -> bool {
    true
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub model: ModelSpec,
    pub cov: CovarianceSpec,
    pub n: usize,
    pub ks: usize,
    pub replications: usize,
    /// The swept values, in sweep order.
    pub coordinates: Vec<(String, SweepValue)>,
}

impl Cell {
    fn rho(&self) -> f64 {
        self.cov.rho()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.replications == 0 || self.replications >= u32::MAX as usize {
            return config_error("replications must be in 1..2^32-1");
        }
        if self.calibration_mode == CalibrationMode::Pooled && self.replications < detect::MIN_NULL_DRAWS {
            return config_error(format!("pooled calibration needs at least {} replications", detect::MIN_NULL_DRAWS));
        }
        if self.k == 0 {
            return config_error("k must be at least 1");
        }
        if self.methods.is_empty() {
            return config_error("no methods requested");
        }
        for s in &self.sweep {
            if !SWEEP_PARAMETERS.contains(&s.parameter.as_str()) {
                return config_error(format!(
                    "cannot sweep '{}'; allowed: {}",
                    s.parameter,
                    SWEEP_PARAMETERS.join(", ")
                ));
            }
            if s.values.is_empty() {
                return config_error(format!("sweep over '{}' has no values", s.parameter));
            }
        }
        self.test_config(1).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        for cell in self.cells(Profile::Full)? {
            cell.model.validate(cell.cov.p).map_err(|e| ExperimentError::Config(format!("cell {}: {e}", cell.index)))?;
            detect::TestConfig { ks: cell.ks, ..self.test_config(cell.ks) }
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            if cell.ks >= cell.cov.p {
                return config_error(format!("cell {}: need ks < p", cell.index));
            }
            if cell.n < 2 * self.h {
                return config_error(format!("cell {}: need n >= 2H", cell.index));
            }
        }
        Ok(())
    }

    pub fn test_config(&self, ks: usize) -> TestConfig {
        TestConfig {
            h: self.h,
            ks,
            mode: self.eigen_mode,
            sdp: self.sdp,
            level: self.level,
            n_null: self.n_null,
            bonferroni: self.bonferroni,
            psi1: self.psi1,
            settle_early: self.settle_early,
        }
    }

    /// The sweep grid, first sweep varying slowest. Cell indices (and hence
    /// seeds) do not depend on the profile.
    pub fn cells(&self, profile: Profile) -> Result<Vec<Cell>, ExperimentError> {
        let base_model = self.model.to_spec()?;
        let base_kind = cov_kind(&self.cov.kind, self.cov.rho, self.cov.cross)?;
        let mut grid: Vec<Vec<(String, SweepValue)>> = vec![Vec::new()];
        for s in &self.sweep {
            grid = grid
                .into_iter()
                .flat_map(|prefix| {
                    s.values.iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push((s.parameter.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        let mut cells = Vec::with_capacity(grid.len());
        for (index, coordinates) in grid.into_iter().enumerate() {
            let mut model = base_model;
            let mut kind = base_kind;
            let (mut p, mut n) = (self.p, self.n);
            for (param, value) in &coordinates {
                apply(param, value, &mut model, &mut kind, &mut p, &mut n)?;
            }
            let ks = self.ks.unwrap_or(self.k * model.s.max(1));
            let mut replications = self.replications;
            if profile == Profile::Desk {
                if p > 1000 {
                    continue;
                }
                if p >= 1000 {
                    replications = replications.min(50);
                }
            }
            cells.push(Cell { index, model, cov: CovarianceSpec { kind, p }, n, ks, replications, coordinates });
        }
        Ok(cells)
    }
}

fn number(param: &str, value: &SweepValue) -> Result<f64, ExperimentError> {
    match value {
        SweepValue::Number(v) => Ok(*v),
        SweepValue::Text(t) => t.trim().parse().or_else(|_| config_error(format!("{param}: '{t}' is not a number"))),
    }
}

fn count(param: &str, value: &SweepValue) -> Result<usize, ExperimentError> {
    let v = number(param, value)?;
    if v < 0.0 || v.fract() != 0.0 {
        return config_error(format!("{param}: {v} is not a count"));
    }
    Ok(v as usize)
}

fn apply(
    param: &str,
    value: &SweepValue,
    model: &mut ModelSpec,
    kind: &mut CovarianceKind,
    p: &mut usize,
    n: &mut usize,
) -> Result<(), ExperimentError> {
    match param {
        "model" => {
            let label = value.to_string();
            let Some(link) = Link::parse(&label) else {
                return config_error(format!("unknown link '{label}'"));
            };
            model.link = link;
            model.s = link.default_sparsity();
        }
        "p" => *p = count(param, value)?,
        "n" => *n = count(param, value)?,
        "s" => model.s = count(param, value)?,
        "kappa" => model.kappa = number(param, value)?,
        "sigma_eps" => model.sigma_eps = number(param, value)?,
        "rho" => {
            let rho = number(param, value)?;
            *kind = match *kind {
                CovarianceKind::Identity | CovarianceKind::ToeplitzAr { .. } => CovarianceKind::ToeplitzAr { rho },
                CovarianceKind::BlockedBySupport { cross, .. } => CovarianceKind::BlockedBySupport { rho, cross },
            };
        }
        "cov" => {
            let text = value.to_string();
            let (t, rho) = match text.split_once(':') {
                Some((t, r)) => (t, r.trim().parse().or_else(|_| config_error(format!("cov: bad rho in '{text}'")))?),
                None => (text.as_str(), 0.0),
            };
            *kind = cov_kind(t.trim(), rho, default_cross())?;
        }
        other => return config_error(format!("cannot sweep '{other}'")),
    }
    Ok(())
}

/// Rejections of one replication, with the statistics behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub cell: usize,
    pub replication: usize,
    pub lambda_max: f64,
    pub sparse_eig: f64,
    pub anova_t: f64,
    pub hc_score: Option<f64>,
    pub sdp_iterations: Option<usize>,
    /// The null draw paired with this replication in pooled mode.
    pub null: Option<NullDraw>,
    pub reject_psi1: bool,
    pub reject_psi2: bool,
    pub reject_psi3: bool,
    pub reject_sss: bool,
    pub reject_sssa: bool,
    pub reject_hc: bool,
}

impl ReplicationRecord {
    fn rejects(&self, m: Method) -> bool {
        match m {
            Method::Sss => self.reject_sss,
            Method::Sssa => self.reject_sssa,
            Method::Hc => self.reject_hc,
            Method::Psi1 => self.reject_psi1,
            Method::Psi2 => self.reject_psi2,
            Method::Psi3 => self.reject_psi3,
        }
    }
}

/// A row of `power_table.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub model: String,
    pub p: usize,
    pub rho: f64,
    pub cov_type: String,
    pub kappa: f64,
    pub method: String,
    pub power: f64,
    pub replications: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: Cell,
    /// Thresholds shared by the cell; absent in per-dataset mode.
    pub thresholds: Option<CalibratedThresholds>,
    pub rejections: BTreeMap<Method, usize>,
    pub error: Option<String>,
}

/// Comparison of an observed power against a reference value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub cell: usize,
    pub method: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub name: String,
    pub master_seed: u64,
    pub profile: Profile,
    pub config: ExperimentConfig,
    pub rows: Vec<PowerRow>,
    pub cells: Vec<CellReport>,
    pub reference_checks: Vec<ReferenceCheck>,
    #[serde(skip)]
    pub raw: Vec<Vec<ReplicationRecord>>,
}

impl PowerReport {
    pub fn reference_failures(&self) -> usize {
        self.reference_checks.iter().filter(|c| !c.pass).count()
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    /// Power of `method` in the cell with sweep index `cell`.
    pub fn power(&self, cell: usize, method: Method) -> Option<f64> {
        let c = self.cells.iter().find(|c| c.cell.index == cell)?;
        let r = *c.rejections.get(&method)?;
        Some(r as f64 / c.cell.replications as f64)
    }
}

/// Reference powers of the SSS test and of correlation HC for Models I-IV
/// at `n = 1000`: `(model, p, covariance type, rho, sss, hc)`.
pub const REFERENCE_POWERS: [(&str, usize, &str, f64, f64, f64); 80] = [
    ref_row("I", 100, "i", 0.0, 1.00, 0.16),
    ref_row("I", 100, "i", 0.3, 1.00, 0.29),
    ref_row("I", 100, "i", 0.5, 0.99, 0.54),
    ref_row("I", 100, "i", 0.8, 1.00, 0.93),
    ref_row("I", 100, "ii", 0.2, 0.90, 0.35),
    ref_row("I", 500, "i", 0.0, 0.98, 0.16),
    ref_row("I", 500, "i", 0.3, 0.99, 0.18),
    ref_row("I", 500, "i", 0.5, 0.97, 0.34),
    ref_row("I", 500, "i", 0.8, 0.98, 0.71),
    ref_row("I", 500, "ii", 0.2, 0.52, 0.25),
    ref_row("I", 1000, "i", 0.0, 0.89, 0.19),
    ref_row("I", 1000, "i", 0.3, 0.88, 0.16),
    ref_row("I", 1000, "i", 0.5, 0.91, 0.33),
    ref_row("I", 1000, "i", 0.8, 0.96, 0.53),
    ref_row("I", 1000, "ii", 0.2, 0.37, 0.30),
    ref_row("I", 2000, "i", 0.0, 0.92, 0.18),
    ref_row("I", 2000, "i", 0.3, 0.86, 0.25),
    ref_row("I", 2000, "i", 0.5, 0.83, 0.43),
    ref_row("I", 2000, "i", 0.8, 0.90, 0.60),
    ref_row("I", 2000, "ii", 0.2, 0.43, 0.17),
    ref_row("II", 100, "i", 0.0, 0.98, 0.12),
    ref_row("II", 100, "i", 0.3, 0.97, 0.16),
    ref_row("II", 100, "i", 0.5, 0.96, 0.24),
    ref_row("II", 100, "i", 0.8, 1.00, 0.37),
    ref_row("II", 100, "ii", 0.2, 0.96, 0.56),
    ref_row("II", 500, "i", 0.0, 0.87, 0.06),
    ref_row("II", 500, "i", 0.3, 0.80, 0.09),
    ref_row("II", 500, "i", 0.5, 0.82, 0.13),
    ref_row("II", 500, "i", 0.8, 0.83, 0.14),
    ref_row("II", 500, "ii", 0.2, 0.77, 0.32),
    ref_row("II", 1000, "i", 0.0, 0.81, 0.09),
    ref_row("II", 1000, "i", 0.3, 0.74, 0.06),
    ref_row("II", 1000, "i", 0.5, 0.77, 0.08),
    ref_row("II", 1000, "i", 0.8, 0.84, 0.11),
    ref_row("II", 1000, "ii", 0.2, 0.69, 0.25),
    ref_row("II", 2000, "i", 0.0, 0.75, 0.11),
    ref_row("II", 2000, "i", 0.3, 0.68, 0.12),
    ref_row("II", 2000, "i", 0.5, 0.68, 0.13),
    ref_row("II", 2000, "i", 0.8, 0.81, 0.10),
    ref_row("II", 2000, "ii", 0.2, 0.63, 0.41),
    ref_row("III", 100, "i", 0.0, 1.00, 0.21),
    ref_row("III", 100, "i", 0.3, 1.00, 0.25),
    ref_row("III", 100, "i", 0.5, 1.00, 0.63),
    ref_row("III", 100, "i", 0.8, 1.00, 1.00),
    ref_row("III", 100, "ii", 0.2, 0.98, 0.78),
    ref_row("III", 500, "i", 0.0, 0.99, 0.11),
    ref_row("III", 500, "i", 0.3, 1.00, 0.12),
    ref_row("III", 500, "i", 0.5, 0.98, 0.11),
    ref_row("III", 500, "i", 0.8, 0.99, 0.22),
    ref_row("III", 500, "ii", 0.2, 0.62, 0.72),
    ref_row("III", 1000, "i", 0.0, 0.99, 0.11),
    ref_row("III", 1000, "i", 0.3, 0.97, 0.06),
    ref_row("III", 1000, "i", 0.5, 0.97, 0.18),
    ref_row("III", 1000, "i", 0.8, 0.92, 0.10),
    ref_row("III", 1000, "ii", 0.2, 0.60, 0.59),
    ref_row("III", 2000, "i", 0.0, 0.96, 0.16),
    ref_row("III", 2000, "i", 0.3, 0.97, 0.19),
    ref_row("III", 2000, "i", 0.5, 0.93, 0.15),
    ref_row("III", 2000, "i", 0.8, 0.88, 0.10),
    ref_row("III", 2000, "ii", 0.2, 0.59, 0.58),
    ref_row("IV", 100, "i", 0.0, 0.89, 0.01),
    ref_row("IV", 100, "i", 0.3, 0.91, 0.03),
    ref_row("IV", 100, "i", 0.5, 0.89, 0.04),
    ref_row("IV", 100, "i", 0.8, 1.00, 0.10),
    ref_row("IV", 100, "ii", 0.2, 0.94, 0.07),
    ref_row("IV", 500, "i", 0.0, 0.70, 0.03),
    ref_row("IV", 500, "i", 0.3, 0.57, 0.04),
    ref_row("IV", 500, "i", 0.5, 0.57, 0.07),
    ref_row("IV", 500, "i", 0.8, 0.69, 0.09),
    ref_row("IV", 500, "ii", 0.2, 0.45, 0.08),
    ref_row("IV", 1000, "i", 0.0, 0.55, 0.07),
    ref_row("IV", 1000, "i", 0.3, 0.56, 0.04),
    ref_row("IV", 1000, "i", 0.5, 0.51, 0.09),
    ref_row("IV", 1000, "i", 0.8, 0.73, 0.06),
    ref_row("IV", 1000, "ii", 0.2, 0.44, 0.08),
    ref_row("IV", 2000, "i", 0.0, 0.58, 0.07),
    ref_row("IV", 2000, "i", 0.3, 0.47, 0.07),
    ref_row("IV", 2000, "i", 0.5, 0.45, 0.09),
    ref_row("IV", 2000, "i", 0.8, 0.61, 0.02),
    ref_row("IV", 2000, "ii", 0.2, 0.40, 0.08),
];

const fn ref_row(
    model: &'static str,
    p: usize,
    cov: &'static str,
    rho: f64,
    sss: f64,
    hc: f64,
) -> (&'static str, usize, &'static str, f64, f64, f64) {
    (model, p, cov, rho, sss, hc)
}

pub const SSS_TOLERANCE: f64 = 0.10;
pub const HC_TOLERANCE: f64 = 0.12;

/// The reference `(sss, hc)` powers for a cell, if it is one of them.
pub fn reference_power(cell: &Cell, level: f64) -> Option<(f64, f64)> {
    let m = &cell.model;
    let standard = cell.n == 1000
        && (level - 0.05).abs() < 1e-12
        && m.s == m.link.default_sparsity()
        && m.sigma_eps == 1.0
        && m.support == SupportRule::FirstS
        && !m.normalize_beta;
    if !standard {
        return None;
    }
    let label = m.link.label();
    let ty = cell.cov.type_label();
    let cross_ok = match cell.cov.kind {
        CovarianceKind::BlockedBySupport { cross, .. } => (cross - 0.1).abs() < 1e-12,
        _ => true,
    };
    REFERENCE_POWERS
        .iter()
        .find(|r| {
            r.0 == label
                && r.1 == cell.cov.p
                && (r.2 == ty || (r.2 == "i" && ty == "identity"))
                && (r.3 - cell.rho()).abs() < 1e-12
                && cross_ok
        })
        .map(|r| (r.4, r.5))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const POOL_TAG: u64 = 1 << 63;

/// Covariates shared by the replications of one cell.
struct CellPlan {
    design: Option<GaussianDesign>,
    beta: Option<nalgebra::DVector<f64>>,
}

fn plan(cfg: &ExperimentConfig, master: u64, cell: &Cell) -> Result<CellPlan, String> {
    if !cfg.fix_beta {
        return Ok(CellPlan { design: None, beta: None });
    }
    let mut rng = stream_rng(master, ((cell.index as u64) << 32) | u32::MAX as u64);
    let support = models::choose_support(&cell.model, cell.cov.p, &mut rng);
    let beta = models::draw_beta(&cell.model, &support, cell.cov.p, &mut rng);
    let block: Vec<usize> = if support.is_empty() { vec![0] } else { support };
    let design = GaussianDesign::new(&cell.cov, &block).map_err(|e| e.to_string())?;
    Ok(CellPlan { design: Some(design), beta: Some(beta) })
}

fn dataset(master: u64, cell: &Cell, rep: usize, plan: &CellPlan) -> Result<(Dataset, ChaCha8Rng), String> {
    let mut rng = stream_rng(master, ((cell.index as u64) << 32) | rep as u64);
    let data = match (&plan.design, &plan.beta) {
        (Some(design), Some(beta)) => models::generate_from(&cell.model, design, beta, cell.n, &mut rng),
        _ => models::generate(&cell.model, &cell.cov, cell.n, &mut rng),
    }
    .map_err(|e| e.to_string())?;
    Ok((data, rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

fn record(cell: &Cell, rep: usize, outcome: &TestOutcome, hc: f64, c_hc: f64, null: Option<NullDraw>) -> ReplicationRecord {
    let s = &outcome.statistics;
    ReplicationRecord {
        cell: cell.index,
        replication: rep,
        lambda_max: s.lambda_max,
        sparse_eig: s.sparse_eig,
        anova_t: s.anova_t,
        hc_score: hc.is_finite().then_some(hc),
        sdp_iterations: s.sdp.map(|d| d.iterations),
        null,
        reject_psi1: outcome.reject_psi1,
        reject_psi2: outcome.reject_psi2,
        reject_psi3: outcome.reject_psi3,
        reject_sss: outcome.reject_sss,
        reject_sssa: outcome.reject_sssa,
        reject_hc: hc > c_hc,
    }
}

fn test_replication(
    cfg: &ExperimentConfig,
    master: u64,
    cell: &Cell,
    rep: usize,
    plan: &CellPlan,
    thresholds: &CalibratedThresholds,
    null: Option<NullDraw>,
) -> Result<ReplicationRecord, String> {
    let (data, _) = dataset(master, cell, rep, plan)?;
    let tc = cfg.test_config(cell.ks);
    let outcome = detect::run_test(&data, thresholds, &tc).map_err(|e| e.to_string())?;
    let hc = baseline_hc::hc_statistic(&data).map_err(|e| e.to_string())?.hc_score;
    Ok(record(cell, rep, &outcome, hc, thresholds.c_hc, null))
}

fn per_dataset_replication(
    cfg: &ExperimentConfig,
    master: u64,
    cell: &Cell,
    rep: usize,
    plan: &CellPlan,
) -> Result<ReplicationRecord, String> {
    let (data, mut rng) = dataset(master, cell, rep, plan)?;
    let tc = cfg.test_config(cell.ks);
    let seed = rng.next_u64();
    let thresholds = detect::calibrate(&data.x, &tc, seed, &Execution::Sequential).map_err(|e| e.to_string())?;
    let outcome = detect::run_test(&data, &thresholds, &tc).map_err(|e| e.to_string())?;
    let hc = baseline_hc::hc_statistic(&data).map_err(|e| e.to_string())?.hc_score;
    Ok(record(cell, rep, &outcome, hc, thresholds.c_hc, None))
}

/// Null draw paired with replication `rep` of a cell, on its own covariates.
fn paired_null(cfg: &ExperimentConfig, master: u64, cell: &Cell, rep: usize, plan: &CellPlan) -> Result<NullDraw, String> {
    let (data, mut rng) = dataset(master, cell, rep, plan)?;
    let z = normal_vector(&mut rng, cell.n);
    detect::null_draw(&data.x, &z, &cfg.test_config(cell.ks)).map_err(|e| e.to_string())
}

/// Null draw `rep` of a shared pool, on fresh covariates.
fn pool_null(cfg: &ExperimentConfig, master: u64, pool: usize, cell: &Cell, rep: usize) -> Result<NullDraw, String> {
    let mut rng = stream_rng(master, POOL_TAG | ((pool as u64) << 32) | rep as u64);
    let support = models::choose_support(&cell.model, cell.cov.p, &mut rng);
    let block: Vec<usize> = if support.is_empty() { vec![0] } else { support };
    let design = GaussianDesign::new(&cell.cov, &block).map_err(|e| e.to_string())?;
    let x = design.sample(cell.n, &mut rng);
    let z = normal_vector(&mut rng, cell.n);
    detect::null_draw(&x, &z, &cfg.test_config(cell.ks)).map_err(|e| e.to_string())
}

/// Key under which cells may share a null pool.
fn pool_key(cell: &Cell) -> String {
    let support = match (cell.cov.kind, cell.model.support) {
        (CovarianceKind::BlockedBySupport { .. }, SupportRule::RandomS) => format!("cell{}", cell.index),
        (CovarianceKind::BlockedBySupport { .. }, SupportRule::FirstS) => format!("first{}", cell.model.s),
        _ => String::new(),
    };
    format!("{}|{:?}|{}|{}|{}", cell.n, cell.cov, cell.ks, support, cell.replications)
}

/// Runs every cell of the experiment.
pub fn run_experiment(cfg: &ExperimentConfig, profile: Profile, exec: &Execution) -> Result<PowerReport, ExperimentError> {
    cfg.validate()?;
    let master = cfg.master_seed;
    let cells = cfg.cells(profile)?;
    let plans: Vec<Result<CellPlan, String>> = cells.iter().map(|c| plan(cfg, master, c)).collect();
    let tasks: Vec<(usize, usize)> =
        cells.iter().enumerate().flat_map(|(i, c)| (0..c.replications).map(move |r| (i, r))).collect();
    let mut thresholds: Vec<Option<Result<CalibratedThresholds, String>>> = vec![None; cells.len()];
    let mut paired: Vec<Option<Vec<NullDraw>>> = vec![None; cells.len()];

    if cfg.calibration_mode == CalibrationMode::Pooled {
        if cfg.share_null_pool {
            let mut keys: Vec<String> = Vec::new();
            let mut pool_of = Vec::with_capacity(cells.len());
            for c in &cells {
                let key = pool_key(c);
                let id = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
                    keys.push(key);
                    keys.len() - 1
                });
                pool_of.push(id);
            }
            let owners: Vec<usize> = (0..keys.len()).map(|k| pool_of.iter().position(|&p| p == k).unwrap()).collect();
            let pool_tasks: Vec<(usize, usize)> =
                owners.iter().enumerate().flat_map(|(k, &o)| (0..cells[o].replications).map(move |r| (k, r))).collect();
            let draws = exec.map(pool_tasks.len(), |t| {
                let (k, r) = pool_tasks[t];
                pool_null(cfg, master, k, &cells[owners[k]], r)
            });
            let mut grouped: Vec<Result<Vec<NullDraw>, String>> = vec![Ok(Vec::new()); keys.len()];
            for ((k, _), d) in pool_tasks.iter().zip(draws) {
                if let Ok(list) = &mut grouped[*k] {
                    match d {
                        Ok(v) => list.push(v),
                        Err(e) => grouped[*k] = Err(e),
                    }
                }
            }
            for (i, c) in cells.iter().enumerate() {
                let t = grouped[pool_of[i]].clone().and_then(|d| pooled_thresholds(cfg, c, &d));
                thresholds[i] = Some(t);
            }
        } else {
            let draws = exec.map(tasks.len(), |t| {
                let (i, r) = tasks[t];
                match &plans[i] {
                    Ok(pl) => paired_null(cfg, master, &cells[i], r, pl),
                    Err(e) => Err(e.clone()),
                }
            });
            let mut grouped: Vec<Result<Vec<NullDraw>, String>> = vec![Ok(Vec::new()); cells.len()];
            for ((i, _), d) in tasks.iter().zip(draws) {
                if let Ok(list) = &mut grouped[*i] {
                    match d {
                        Ok(v) => list.push(v),
                        Err(e) => grouped[*i] = Err(e),
                    }
                }
            }
            for (i, c) in cells.iter().enumerate() {
                if let Ok(d) = &grouped[i] {
                    paired[i] = Some(d.clone());
                }
                thresholds[i] = Some(grouped[i].clone().and_then(|d| pooled_thresholds(cfg, c, &d)));
            }
        }
    }

    let results = exec.map(tasks.len(), |t| {
        let (i, r) = tasks[t];
        let cell = &cells[i];
        let pl = plans[i].as_ref().map_err(|e| e.clone())?;
        match &thresholds[i] {
            None => per_dataset_replication(cfg, master, cell, r, pl),
            Some(Err(e)) => Err(e.clone()),
            Some(Ok(th)) => {
                let null = paired[i].as_ref().map(|d| d[r]);
                test_replication(cfg, master, cell, r, pl, th, null)
            }
        }
    });

    let mut raw: Vec<Vec<ReplicationRecord>> = vec![Vec::new(); cells.len()];
    let mut errors: Vec<Option<String>> = vec![None; cells.len()];
    for ((i, r), res) in tasks.iter().zip(results) {
        match res {
            Ok(rec) => raw[*i].push(rec),
            Err(e) => {
                if errors[*i].is_none() {
                    errors[*i] = Some(format!("replication {r}: {e}"));
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut cell_reports = Vec::new();
    let mut checks = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let error = match &thresholds[i] {
            Some(Err(e)) => Some(format!("calibration: {e}")),
            _ => errors[i].clone(),
        };
        let mut rejections = BTreeMap::new();
        if error.is_none() {
            for &m in &cfg.methods {
                let count = raw[i].iter().filter(|rec| rec.rejects(m)).count();
                rejections.insert(m, count);
                rows.push(PowerRow {
                    model: cell.model.link.label(),
                    p: cell.cov.p,
                    rho: cell.rho(),
                    cov_type: cell.cov.type_label().to_string(),
                    kappa: cell.model.kappa,
                    method: m.label().to_string(),
                    power: count as f64 / cell.replications as f64,
                    replications: cell.replications,
                    master_seed: master,
                });
            }
            if let Some((sss, hc)) = reference_power(cell, cfg.level) {
                for (m, expected, tolerance) in [(Method::Sss, sss, SSS_TOLERANCE), (Method::Hc, hc, HC_TOLERANCE)] {
                    if let Some(&count) = rejections.get(&m) {
                        let observed = count as f64 / cell.replications as f64;
                        checks.push(ReferenceCheck {
                            cell: cell.index,
                            method: m.label().to_string(),
                            expected,
                            observed,
                            tolerance,
                            pass: (observed - expected).abs() <= tolerance + 1e-12,
                        });
                    }
                }
            }
        } else {
            log::error!("cell {} failed: {}", cell.index, error.as_deref().unwrap_or(""));
        }
        cell_reports.push(CellReport {
            cell: cell.clone(),
            thresholds: thresholds[i].as_ref().and_then(|t| t.as_ref().ok().cloned()),
            rejections,
            error,
        });
    }

    Ok(PowerReport {
        name: cfg.name.clone(),
        master_seed: master,
        profile,
        config: cfg.clone(),
        rows,
        cells: cell_reports,
        reference_checks: checks,
        raw,
    })
}

fn pooled_thresholds(cfg: &ExperimentConfig, cell: &Cell, draws: &[NullDraw]) -> Result<CalibratedThresholds, String> {
    let tc = TestConfig { n_null: draws.len().max(detect::MIN_NULL_DRAWS), ..cfg.test_config(cell.ks) };
    detect::thresholds_from_draws(draws, &tc, CalibrationMode::Pooled, cfg.master_seed, cell.n, cell.cov.p)
        .map_err(|e: DetectError| e.to_string())
}

pub const POWER_TABLE_HEADER: [&str; 9] =
    ["model", "p", "rho", "cov_type", "kappa", "method", "power", "replications", "master_seed"];

/// Writes `power_table.csv`.
pub fn write_power_table(rows: &[PowerRow], out: impl Write) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(POWER_TABLE_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Writes `power_table.csv`, `report.json`, `raw/cell-NNN.jsonl`, one
/// `curves/*.tsv` per method and curve along the last sweep parameter, and
/// `samples/cell-NNN-*.tsv` with null and alternative values per cell.
pub fn emit_outputs(report: &PowerReport, dir: impl AsRef<Path>) -> Result<(), ExperimentError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_power_table(&report.rows, BufWriter::new(fs::File::create(dir.join("power_table.csv"))?))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;

    if report.raw.iter().any(|r| !r.is_empty()) {
        fs::create_dir_all(dir.join("raw"))?;
    }
    for (cell, records) in report.cells.iter().zip(&report.raw) {
        if records.is_empty() {
            continue;
        }
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("raw/cell-{:03}.jsonl", cell.cell.index)))?);
        for rec in records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }

    write_samples(report, dir)?;
    write_curves(report, dir)?;
    Ok(())
}

fn write_samples(report: &PowerReport, dir: &Path) -> Result<(), ExperimentError> {
    for (cell, records) in report.cells.iter().zip(&report.raw) {
        if records.is_empty() || records.iter().any(|r| r.null.is_none()) {
            continue;
        }
        fs::create_dir_all(dir.join("samples"))?;
        type Pick = fn(&ReplicationRecord) -> (Option<f64>, Option<f64>);
        let stats: [(&str, Pick); 3] = [
            ("sparse_eig", |r| (r.null.map(|n| n.sparse_eig), Some(r.sparse_eig))),
            ("lambda_max", |r| (r.null.map(|n| n.lambda_max), Some(r.lambda_max))),
            ("hc", |r| (r.null.and_then(|n| n.hc), r.hc_score)),
        ];
        for (name, pick) in stats {
            let mut text = String::from("hypothesis\tvalue\n");
            for r in records {
                if let (Some(v), _) = pick(r) {
                    let _ = writeln!(text, "null\t{v}");
                }
            }
            for r in records {
                if let (_, Some(v)) = pick(r) {
                    let _ = writeln!(text, "alternative\t{v}");
                }
            }
            fs::write(dir.join(format!("samples/cell-{:03}-{name}.tsv", cell.cell.index)), text)?;
        }
    }
    Ok(())
}

fn write_curves(report: &PowerReport, dir: &Path) -> Result<(), ExperimentError> {
    let Some(last) = report.config.sweep.last() else {
        return Ok(());
    };
    let mut curves: BTreeMap<(String, String), Vec<(String, f64)>> = BTreeMap::new();
    let methods = &report.config.methods;
    for cr in &report.cells {
        if cr.error.is_some() {
            continue;
        }
        let coords = &cr.cell.coordinates;
        let Some((_, x)) = coords.last() else { continue };
        let group: Vec<String> = coords[..coords.len() - 1].iter().map(|(k, v)| format!("{k}={v}")).collect();
        let group = if group.is_empty() { "all".to_string() } else { group.join("_") };
        for &m in methods {
            let power = cr.rejections.get(&m).copied().unwrap_or(0) as f64 / cr.cell.replications as f64;
            curves.entry((m.label().to_string(), group.clone())).or_default().push((x.to_string(), power));
        }
    }
    if curves.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir.join("curves"))?;
    for ((method, group), points) in curves {
        let mut text = format!("{}\tpower\n", last.parameter);
        for (x, y) in points {
            let _ = writeln!(text, "{x}\t{y}");
        }
        fs::write(dir.join(format!("curves/{}__{}.tsv", method, sanitize(&group))), text)?;
    }
    Ok(())
}
