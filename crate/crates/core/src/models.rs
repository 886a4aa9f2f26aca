//! Synthetic data: covariance structures, sparse coefficient vectors and
//! responses under the null and the single-index link functions used in the
//! power studies.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest eigenvalue a realized covariance matrix may have.
pub const MIN_EIGENVALUE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("covariance is not positive definite (smallest eigenvalue <= {MIN_EIGENVALUE})")]
    NotPositiveDefinite,
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("dataset invalid: {0}")]
    InvalidDataset(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shape of the covariate covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovarianceKind {
    Identity,
    /// `sigma_ij = rho^|i-j|`.
    ToeplitzAr { rho: f64 },
    /// `rho` inside the support block and inside its complement, `cross`
    /// between the two blocks.
    BlockedBySupport { rho: f64, cross: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub kind: CovarianceKind,
    pub p: usize,
}

impl CovarianceSpec {
    pub fn identity(p: usize) -> Self {
        Self { kind: CovarianceKind::Identity, p }
    }

    pub fn toeplitz(rho: f64, p: usize) -> Self {
        Self { kind: CovarianceKind::ToeplitzAr { rho }, p }
    }

    /// Block structure with the conventional cross-block correlation of 0.1.
    pub fn blocked(rho: f64, p: usize) -> Self {
        Self { kind: CovarianceKind::BlockedBySupport { rho, cross: 0.1 }, p }
    }

    /// Correlation parameter reported in tables (0 for the identity).
    pub fn rho(&self) -> f64 {
        match self.kind {
            CovarianceKind::Identity => 0.0,
            CovarianceKind::ToeplitzAr { rho } | CovarianceKind::BlockedBySupport { rho, .. } => rho,
        }
    }

    /// Short label: `identity`, `i` (banded Toeplitz) or `ii` (blocked).
    pub fn type_label(&self) -> &'static str {
        match self.kind {
            CovarianceKind::Identity => "identity",
            CovarianceKind::ToeplitzAr { .. } => "i",
            CovarianceKind::BlockedBySupport { .. } => "ii",
        }
    }
}

/// Link function generating the response from the index `u = x'beta` and
/// the noise draw `e = sigma_eps * N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Link {
    /// `y = e`
    Null,
    /// `y = 0.02 (16u - exp(u)) + e`
    LinearExpI,
    /// `y = 0.2 sin(u/2) exp(u/2) + e`
    SinExpII,
    /// `y = 0.8 (u - u^3/15) + e`
    CubicIII,
    /// `y = sin(u) exp(u/10) e`
    MultNoiseIV,
    /// `y = kappa u - exp(u) + e`
    VaryKappaV,
    /// `y = (15u - exp(u)) kappa + 4e`
    ScaledVI,
    /// `y = sin(u) exp(10 u kappa) e`
    MultKappaVII,
    /// `y = t - t^3/(3k) + e` with `t = x_1 + ... + x_k`; zero marginal
    /// correlation with every covariate.
    CubicExample { k: usize },
}

impl Link {
    /// Support size used for this link in the simulation designs.
    pub fn default_sparsity(&self) -> usize {
        match *self {
            Link::Null => 0,
            Link::LinearExpI | Link::VaryKappaV | Link::ScaledVI => 7,
            Link::SinExpII | Link::MultNoiseIV | Link::MultKappaVII => 10,
            Link::CubicIII => 5,
            Link::CubicExample { k } => k,
        }
    }

    /// Evaluates the response for one observation.
    pub fn response(&self, u: f64, e: f64, kappa: f64) -> f64 {
        match *self {
            Link::Null => e,
            Link::LinearExpI => 0.02 * (16.0 * u - u.exp()) + e,
            Link::SinExpII => 0.2 * (u / 2.0).sin() * (u / 2.0).exp() + e,
            Link::CubicIII => 0.8 * (u - u.powi(3) / 15.0) + e,
            Link::MultNoiseIV => u.sin() * (u / 10.0).exp() * e,
            Link::VaryKappaV => kappa * u - u.exp() + e,
            Link::ScaledVI => (15.0 * u - u.exp()) * kappa + 4.0 * e,
            Link::MultKappaVII => u.sin() * (10.0 * u * kappa).exp() * e,
            Link::CubicExample { k } => u - u.powi(3) / (3.0 * k as f64) + e,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Link::Null => "null".into(),
            Link::LinearExpI => "I".into(),
            Link::SinExpII => "II".into(),
            Link::CubicIII => "III".into(),
            Link::MultNoiseIV => "IV".into(),
            Link::VaryKappaV => "V".into(),
            Link::ScaledVI => "VI".into(),
            Link::MultKappaVII => "VII".into(),
            Link::CubicExample { k } => format!("cubic{k}"),
        }
    }

    /// Parses `null`, roman numerals `I`..`VII`, or `cubic<k>`.
    pub fn parse(label: &str) -> Option<Link> {
        let l = label.trim();
        Some(match l.to_ascii_lowercase().as_str() {
            "null" | "0" => Link::Null,
            "i" | "1" => Link::LinearExpI,
            "ii" | "2" => Link::SinExpII,
            "iii" | "3" => Link::CubicIII,
            "iv" | "4" => Link::MultNoiseIV,
            "v" | "5" => Link::VaryKappaV,
            "vi" | "6" => Link::ScaledVI,
            "vii" | "7" => Link::MultKappaVII,
            other => {
                let k = other.strip_prefix("cubic")?.trim_start_matches(['-', '_', ':']);
                let k: usize = if k.is_empty() { 5 } else { k.parse().ok()? };
                if k == 0 {
                    return None;
                }
                Link::CubicExample { k }
            }
        })
    }
}

impl From<Link> for String {
    fn from(link: Link) -> String {
        link.label()
    }
}

impl TryFrom<String> for Link {
    type Error = String;

    fn try_from(label: String) -> Result<Self, Self::Error> {
        Link::parse(&label).ok_or_else(|| format!("unknown link '{label}'"))
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Where the active coordinates sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportRule {
    /// Coordinates `0..s`.
    #[default]
    FirstS,
    /// A uniformly random `s`-subset.
    RandomS,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub link: Link,
    pub s: usize,
    #[serde(default)]
    pub support: SupportRule,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "one")]
    pub sigma_eps: f64,
    /// Rescale beta to unit Euclidean norm after drawing it.
    #[serde(default)]
    pub normalize_beta: bool,
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    /// The link with its customary support size, first-s support, unit noise.
    pub fn new(link: Link) -> Self {
        Self {
            link,
            s: link.default_sparsity(),
            support: SupportRule::FirstS,
            kappa: 1.0,
            sigma_eps: 1.0,
            normalize_beta: false,
        }
    }

    pub fn null() -> Self {
        Self::new(Link::Null)
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn validate(&self, p: usize) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return bad(format!("sigma_eps must be positive, got {}", self.sigma_eps));
        }
        if !self.kappa.is_finite() {
            return bad("kappa must be finite".into());
        }
        match self.link {
            Link::Null if self.s != 0 => bad("null model has s = 0".into()),
            Link::Null => Ok(()),
            Link::CubicExample { k } if self.s != k => {
                bad(format!("cubic example needs s = k = {k}, got s = {}", self.s))
            }
            _ if self.s == 0 => bad("non-null model needs s >= 1".into()),
            _ if self.s >= p => bad(format!("need s < p, got s = {} and p = {p}", self.s)),
            _ => Ok(()),
        }
    }
}

/// Samples `(y_i, x_i)` plus optional provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub truth: Option<Truth>,
}

/// How a synthetic dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub model: ModelSpec,
    pub covariance: CovarianceSpec,
    pub support: Vec<usize>,
    pub beta: Vec<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self, ModelError> {
        let ds = Self { x, y, truth: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        validate_xy(&self.x, &self.y)
    }

    /// Writes `y,x1,...,xp` with 17 significant digits per value.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: impl Write) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = Vec::with_capacity(self.p() + 1);
        header.push("y".to_string());
        header.extend((1..=self.p()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.p() + 1);
        for i in 0..self.n() {
            row.clear();
            row.push(format!("{:.16e}", self.y[i]));
            row.extend((0..self.p()).map(|j| format!("{:.16e}", self.x[(i, j)])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_csv_from(File::open(path)?)
    }

    pub fn read_csv_from(input: impl std::io::Read) -> Result<Self, ModelError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0).map(str::trim) != Some("y") || header.len() < 2 {
            return Err(ModelError::InvalidDataset("header must be y,x1,...,xp".into()));
        }
        let p = header.len() - 1;
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != p + 1 {
                return Err(ModelError::InvalidDataset(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    rec.len(),
                    p + 1
                )));
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    ModelError::InvalidDataset(format!("row {}: cannot parse {field:?}", line + 1))
                })?;
                if j == 0 {
                    ys.push(v);
                } else {
                    xs.push(v);
                }
            }
        }
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, p, &xs);
        Self::new(x, DVector::from_vec(ys))
    }
}

pub(crate) fn validate_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(), ModelError> {
    if x.nrows() != y.len() {
        return Err(ModelError::InvalidDataset(format!(
            "x has {} rows but y has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    if y.len() < 2 {
        return Err(ModelError::InvalidDataset("need n >= 2".into()));
    }
    if x.ncols() == 0 {
        return Err(ModelError::InvalidDataset("need p >= 1".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidDataset("non-finite entry".into()));
    }
    Ok(())
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub model: ModelSpec,
    pub covariance: CovarianceSpec,
    pub n: usize,
    pub seed: u64,
    pub support: Vec<usize>,
    pub beta: Vec<f64>,
}

impl DatasetSidecar {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

/// Realizes the covariance matrix, failing unless it is positive definite
/// with smallest eigenvalue above [`MIN_EIGENVALUE`].
pub fn build_covariance(spec: &CovarianceSpec, support: &[usize]) -> Result<DMatrix<f64>, ModelError> {
    let p = spec.p;
    if p == 0 {
        return Err(ModelError::InvalidSpec("p must be positive".into()));
    }
    let sigma = match spec.kind {
        CovarianceKind::Identity => DMatrix::identity(p, p),
        CovarianceKind::ToeplitzAr { rho } => {
            if !(0.0..1.0).contains(&rho) {
                return Err(ModelError::InvalidSpec(format!("toeplitz rho must be in [0, 1), got {rho}")));
            }
            DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32))
        }
        CovarianceKind::BlockedBySupport { rho, cross } => {
            if support.is_empty() {
                return Err(ModelError::InvalidSpec("blocked covariance needs a nonempty support".into()));
            }
            let mut in_s = vec![false; p];
            for &j in support {
                if j >= p {
                    return Err(ModelError::InvalidSpec(format!("support index {j} out of range")));
                }
                in_s[j] = true;
            }
            DMatrix::from_fn(p, p, |i, j| {
                if i == j {
                    1.0
                } else if in_s[i] == in_s[j] {
                    rho
                } else {
                    cross
                }
            })
        }
    };
    check_positive_definite(&sigma)?;
    Ok(sigma)
}

/// lambda_min(A) > MIN_EIGENVALUE iff A - MIN_EIGENVALUE I has a Cholesky factor.
fn check_positive_definite(sigma: &DMatrix<f64>) -> Result<(), ModelError> {
    let shifted = sigma - DMatrix::identity(sigma.nrows(), sigma.ncols()) * MIN_EIGENVALUE;
    match shifted.cholesky() {
        Some(_) => Ok(()),
        None => Err(ModelError::NotPositiveDefinite),
    }
}

/// Row sampler for `N(0, Sigma)`.
///
/// The banded Toeplitz case uses the closed-form Cholesky factor of the AR(1)
/// covariance (each coordinate is `rho` times its predecessor plus
/// `sqrt(1 - rho^2)` fresh noise), which avoids storing a p x p factor.
/// Other structures use the dense Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDesign {
    p: usize,
    sampler: Sampler,
}

#[derive(Debug, Clone)]
enum Sampler {
    Identity,
    Ar1 { rho: f64, innovation: f64 },
    Dense { factor_t: DMatrix<f64> },
}

impl GaussianDesign {
    pub fn new(spec: &CovarianceSpec, support: &[usize]) -> Result<Self, ModelError> {
        let sampler = match spec.kind {
            CovarianceKind::Identity => Sampler::Identity,
            CovarianceKind::ToeplitzAr { rho } => {
                if !(0.0..1.0).contains(&rho) {
                    return Err(ModelError::InvalidSpec(format!("toeplitz rho must be in [0, 1), got {rho}")));
                }
                // smallest eigenvalue of the AR(1) Toeplitz matrix is at least (1-rho)/(1+rho)
                if (1.0 - rho) / (1.0 + rho) <= MIN_EIGENVALUE {
                    return Err(ModelError::NotPositiveDefinite);
                }
                if rho == 0.0 {
                    Sampler::Identity
                } else {
                    Sampler::Ar1 { rho, innovation: (1.0 - rho * rho).sqrt() }
                }
            }
            CovarianceKind::BlockedBySupport { .. } => {
                let sigma = build_covariance(spec, support)?;
                let chol = sigma.cholesky().ok_or(ModelError::NotPositiveDefinite)?;
                Sampler::Dense { factor_t: chol.l().transpose() }
            }
        };
        Ok(Self { p: spec.p, sampler })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Draws an n x p design. Standard normals are consumed row by row.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let p = self.p;
        let mut z = DMatrix::zeros(n, p);
        for i in 0..n {
            for j in 0..p {
                z[(i, j)] = rng.sample(StandardNormal);
            }
        }
        match &self.sampler {
            Sampler::Identity => z,
            Sampler::Ar1 { rho, innovation } => {
                for j in 1..p {
                    for i in 0..n {
                        z[(i, j)] = rho * z[(i, j - 1)] + innovation * z[(i, j)];
                    }
                }
                z
            }
            Sampler::Dense { factor_t } => z * factor_t,
        }
    }
}

/// Chooses the active coordinates (sorted).
pub fn choose_support<R: Rng + ?Sized>(spec: &ModelSpec, p: usize, rng: &mut R) -> Vec<usize> {
    match spec.support {
        _ if spec.s == 0 => Vec::new(),
        SupportRule::FirstS => (0..spec.s).collect(),
        SupportRule::RandomS => {
            let mut idx = index::sample(rng, p, spec.s).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Coefficients on a given support: standard normal draws, except for the
/// cubic example whose index is the plain sum of its coordinates.
pub fn draw_beta<R: Rng + ?Sized>(spec: &ModelSpec, support: &[usize], p: usize, rng: &mut R) -> DVector<f64> {
    let mut beta = DVector::zeros(p);
    for &j in support {
        beta[j] = match spec.link {
            Link::CubicExample { .. } => 1.0,
            _ => rng.sample(StandardNormal),
        };
    }
    if spec.normalize_beta {
        let norm = beta.norm();
        if norm > 0.0 {
            beta /= norm;
        }
    }
    beta
}

/// Draws a coefficient vector: support first, then its nonzero entries.
pub fn sample_beta<R: Rng + ?Sized>(spec: &ModelSpec, p: usize, rng: &mut R) -> DVector<f64> {
    let support = choose_support(spec, p, rng);
    draw_beta(spec, &support, p, rng)
}

/// Draws a full dataset: support, beta, design rows, then noise.
pub fn generate<R: Rng + ?Sized>(
    spec: &ModelSpec,
    cov: &CovarianceSpec,
    n: usize,
    rng: &mut R,
) -> Result<Dataset, ModelError> {
    spec.validate(cov.p)?;
    let support = choose_support(spec, cov.p, rng);
    let beta = draw_beta(spec, &support, cov.p, rng);
    // the blocked structure needs some support even under the null
    let block_support: Vec<usize> = if support.is_empty() { vec![0] } else { support.clone() };
    let design = GaussianDesign::new(cov, &block_support)?;
    let mut ds = generate_from(spec, &design, &beta, n, rng)?;
    ds.truth = Some(Truth { model: *spec, covariance: *cov, support, beta: beta.iter().copied().collect() });
    Ok(ds)
}

/// Draws `x` from a prepared design and the response for a fixed beta.
pub fn generate_from<R: Rng + ?Sized>(
    spec: &ModelSpec,
    design: &GaussianDesign,
    beta: &DVector<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Dataset, ModelError> {
    if beta.len() != design.p() {
        return Err(ModelError::InvalidSpec(format!(
            "beta has length {} but the design has p = {}",
            beta.len(),
            design.p()
        )));
    }
    if n < 2 {
        return Err(ModelError::InvalidSpec("need n >= 2".into()));
    }
    let x = design.sample(n, rng);
    let index = &x * beta;
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = rng.sample::<f64, _>(StandardNormal) * spec.sigma_eps;
        spec.link.response(index[i], e, spec.kappa)
    });
    let ds = Dataset { x, y, truth: None };
    ds.validate()?;
    Ok(ds)
}
