//! Spectral tests for detecting dependence of a response on a sparse linear
//! index of Gaussian covariates.
//!
//! The statistics are built from the sliced inverse regression matrix of a
//! dataset: its largest eigenvalue, its largest sparse eigenvalue (exact or
//! through a semidefinite relaxation), and an ANOVA-type second moment of
//! the response. Thresholds come from Monte-Carlo null draws. A Higher
//! Criticism test on marginal correlations serves as a baseline, and the
//! [`experiments`] module runs seeded power studies.

mod linalg;

pub mod baseline_hc;
pub mod detect;
pub mod exec;
pub mod experiments;
pub mod models;
pub mod sir;
pub mod sparse_eig;

pub use baseline_hc::{hc_statistic, hc_test, HcResult};
pub use detect::{
    calibrate, compute_statistics, run_test, CalibratedThresholds, CalibrationMode, EigenMode, TestConfig, TestOutcome,
    TestStatistics,
};
pub use exec::Execution;
pub use experiments::{emit_outputs, run_experiment, ExperimentConfig, PowerReport, Profile};
pub use models::{CovarianceKind, CovarianceSpec, Dataset, Link, ModelSpec, SupportRule};
pub use sir::{slice, SlicedSummary};
pub use sparse_eig::{exact_sparse_eigenvalue, sdp_sparse_eigenvalue, soft_threshold_bound, SdpResult, SdpSettings};

/// Any error raised by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Sir(#[from] sir::SirError),
    #[error(transparent)]
    SparseEig(#[from] sparse_eig::SparseEigError),
    #[error(transparent)]
    Hc(#[from] baseline_hc::HcError),
    #[error(transparent)]
    Detect(#[from] detect::DetectError),
    #[error(transparent)]
    Experiment(#[from] experiments::ExperimentError),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        use detect::DetectError as D;
        use models::ModelError as M;
        use sparse_eig::SparseEigError as S;
        let model = |m: &M| matches!(m, M::NotPositiveDefinite);
        let sparse = |s: &S| matches!(s, S::DidNotConverge(_));
        match self {
            Error::Model(m) => model(m),
            Error::Sir(sir::SirError::Data(m)) => model(m),
            Error::SparseEig(s) => sparse(s),
            Error::Detect(D::Model(m)) | Error::Detect(D::Sir(sir::SirError::Data(m))) => model(m),
            Error::Detect(D::SparseEig(s)) => sparse(s),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
