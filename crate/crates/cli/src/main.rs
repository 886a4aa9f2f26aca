use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use sirdetect::detect::Psi1Form;
use sirdetect::experiments::{self, ExperimentError};
use sirdetect::models::{self, DatasetSidecar};
use sirdetect::{
    CalibratedThresholds, CovarianceKind, CovarianceSpec, Dataset, EigenMode, Error, Execution, ExperimentConfig,
    Link, ModelSpec, Profile, SdpSettings, SupportRule, TestConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_FLAGGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sirdetect", version, about = "Sparse SIR spectral tests for dependence on a linear index")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and write it as CSV with a JSON sidecar.
    Gen(GenArgs),
    /// Calibrate on a dataset's covariates and test it.
    Test(TestArgs),
    /// Calibrate thresholds on a dataset's covariates.
    Calibrate(TestArgs),
    /// Higher Criticism on marginal correlations.
    Hc(HcArgs),
    /// Run a power study from a TOML config.
    Power(PowerArgs),
}

#[derive(clap::Args, Debug)]
struct GenArgs {
    /// `null`, `I`..`VII` or `cubic<k>`.
    #[arg(long, default_value = "I")]
    model: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    p: usize,
    /// Support size; defaults to the model's usual value.
    #[arg(long)]
    s: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_eps: f64,
    #[arg(long, value_enum, default_value_t = CovArg::Identity)]
    cov: CovArg,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.1)]
    cross: f64,
    #[arg(long)]
    random_support: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; the sidecar goes next to it with a `.json` extension.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CovArg {
    Identity,
    I,
    Ii,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Auto,
    Exact,
    Sdp,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Psi1Arg {
    Calibrated,
    Theory,
}

#[derive(clap::Args, Debug)]
struct TestArgs {
    /// Dataset CSV with the response in the first column.
    data: PathBuf,
    #[arg(long = "h-slices", default_value_t = sirdetect::sir::DEFAULT_SLICES)]
    h_slices: usize,
    #[arg(long, default_value_t = 1)]
    ks: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    #[arg(long = "null-reps", default_value_t = 100)]
    null_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    bonferroni: bool,
    #[arg(long, value_enum, default_value_t = Psi1Arg::Calibrated)]
    psi1: Psi1Arg,
    /// Relative duality-gap tolerance of the SDP solver.
    #[arg(long)]
    sdp_tol: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Use thresholds from a previous `calibrate` run instead of calibrating.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Dump the slice means to this CSV.
    #[arg(long)]
    slice_means: Option<PathBuf>,
    /// Output JSON path; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct HcArgs {
    data: PathBuf,
    /// Also report the decision against this critical value.
    #[arg(long)]
    c_hc: Option<f64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(clap::Args, Debug)]
struct PowerArgs {
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "power-out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// Overrides the config value.
    #[arg(long)]
    replications: Option<usize>,
    /// Overrides the config value.
    #[arg(long)]
    master_seed: Option<u64>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

macro_rules! lib_err {
    ($e:expr) => {
        $e.map_err(|e| Failure::Lib(Error::from(e)))
    };
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Gen(a) => gen(a).map(|_| 0),
        Command::Test(a) => test(a, false).map(|_| 0),
        Command::Calibrate(a) => test(a, true).map(|_| 0),
        Command::Hc(a) => hc(a).map(|_| 0),
        Command::Power(a) => power(a),
    }
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
    text.push('\n');
    let written = match out {
        Some(path) => fs::write(path, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    };
    written.map_err(|e| Failure::Usage(e.to_string()))
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    use rand::SeedableRng;
    let Some(link) = Link::parse(&a.model) else {
        return Err(Failure::Usage(format!("unknown model '{}'", a.model)));
    };
    let mut model = ModelSpec::new(link);
    model.s = a.s.unwrap_or(model.s);
    model.kappa = a.kappa;
    model.sigma_eps = a.sigma_eps;
    if a.random_support {
        model.support = SupportRule::RandomS;
    }
    let kind = match a.cov {
        CovArg::Identity => CovarianceKind::Identity,
        CovArg::I => CovarianceKind::ToeplitzAr { rho: a.rho },
        CovArg::Ii => CovarianceKind::BlockedBySupport { rho: a.rho, cross: a.cross },
    };
    let cov = CovarianceSpec { kind, p: a.p };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let data = lib_err!(models::generate(&model, &cov, a.n, &mut rng))?;
    lib_err!(data.write_csv(&a.out))?;
    let truth = data.truth.clone().expect("generated datasets carry their truth");
    let sidecar =
        DatasetSidecar { model, covariance: cov, n: a.n, seed: a.seed, support: truth.support, beta: truth.beta };
    lib_err!(sidecar.write(a.out.with_extension("json")))?;
    info!("wrote {} ({} x {})", a.out.display(), data.n(), data.p());
    Ok(())
}

fn test_config(a: &TestArgs) -> Result<TestConfig, Failure> {
    let mut sdp = SdpSettings::default();
    if let Some(tol) = a.sdp_tol {
        sdp = SdpSettings::with_tolerance(tol);
    }
    let cfg = TestConfig {
        h: a.h_slices,
        ks: a.ks,
        mode: match a.mode {
            ModeArg::Auto => EigenMode::Auto,
            ModeArg::Exact => EigenMode::Exact,
            ModeArg::Sdp => EigenMode::Sdp,
        },
        sdp,
        level: a.level,
        n_null: a.null_reps,
        bonferroni: a.bonferroni,
        psi1: match a.psi1 {
            Psi1Arg::Calibrated => Psi1Form::Calibrated,
            Psi1Arg::Theory => Psi1Form::Theory,
        },
        ..TestConfig::new(a.ks)
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn test(a: TestArgs, calibrate_only: bool) -> Result<(), Failure> {
    let cfg = test_config(&a)?;
    let data = lib_err!(Dataset::read_csv(&a.data))?;
    if let Some(path) = &a.slice_means {
        let summary = lib_err!(sirdetect::slice(&data, cfg.h))?;
        lib_err!(summary.write_csv(path))?;
    }
    let exec = a.workers.map(Execution::with_workers).unwrap_or_default();
    let thresholds: CalibratedThresholds = match &a.thresholds {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => lib_err!(sirdetect::calibrate(&data.x, &cfg, a.seed, &exec))?,
    };
    if calibrate_only {
        return emit_json(&thresholds, a.out.as_deref());
    }
    let outcome = lib_err!(sirdetect::run_test(&data, &thresholds, &cfg))?;
    if let Some(d) = &outcome.statistics.sdp {
        info!("sdp: {} iterations, bounds [{:.6}, {:.6}]", d.iterations, d.value, d.upper_bound);
    }
    emit_json(&outcome, a.out.as_deref())
}

#[derive(serde::Serialize)]
struct HcReport {
    #[serde(flatten)]
    result: sirdetect::HcResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    reject: Option<bool>,
}

fn hc(a: HcArgs) -> Result<(), Failure> {
    let data = lib_err!(Dataset::read_csv(&a.data))?;
    let result = lib_err!(sirdetect::hc_statistic(&data))?;
    let reject = a.c_hc.map(|c| result.hc_score > c);
    emit_json(&HcReport { result, reject }, a.out.as_deref())
}

fn power(a: PowerArgs) -> Result<u8, Failure> {
    let mut cfg = lib_err!(ExperimentConfig::load(&a.config))?;
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    if let Some(seed) = a.master_seed {
        cfg.master_seed = seed;
    }
    let profile = match a.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Full => Profile::Full,
    };
    let exec = a.workers.map(Execution::with_workers).unwrap_or_default();
    let report = match experiments::run_experiment(&cfg, profile, &exec) {
        Ok(r) => r,
        Err(ExperimentError::Config(msg)) => return Err(Failure::Usage(msg)),
        Err(e) => return Err(Failure::Lib(e.into())),
    };
    lib_err!(experiments::emit_outputs(&report, &a.out_dir))?;
    for c in report.reference_checks.iter().filter(|c| !c.pass) {
        eprintln!(
            "flagged: cell {} {} power {:.2} vs reference {:.2} (tolerance {:.2})",
            c.cell, c.method, c.observed, c.expected, c.tolerance
        );
    }
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("cell {} failed: {}", c.cell.index, c.error.as_deref().unwrap_or_default());
    }
    println!("{}", a.out_dir.join("power_table.csv").display());
    Ok(if report.failed_cells() > 0 {
        EXIT_NUMERICAL
    } else if report.reference_failures() > 0 {
        EXIT_FLAGGED
    } else {
        0
    })
}
