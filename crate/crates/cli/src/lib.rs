//! Batch front end: every command reads JSON/CSV/f64le inputs, calls one
//! library operation and writes JSON artifacts (with an embedded
//! [`RunManifest`]) plus CSV mirrors for plotting.

pub mod manifest;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use msical_core::estimators::{fit, resolve_omega, FitOptions, Method, OmegaMode};
use msical_core::experiments::nav::{nav_eval, NamedModel, NavMetrics, NavScenario};
use msical_core::experiments::{run_nav_study, run_simulation_study, NavStudyConfig, StudyConfig};
use msical_core::inference::{near_stationarity_test, TestOptions};
use msical_core::io::{read_replicate, write_csv, write_f64le};
use msical_core::models::{simulate_path, Replicate};
use msical_core::wv::common_scales;
use msical_core::{compute_weights, estimate_wv, CompositeModel, StreamKey, WVEstimate, WvOptions};

pub use manifest::{Artifact, InputDigest, RunManifest};

/// Environment variable that overrides `--seed`.
pub const SEED_ENV: &str = "MSICAL_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read input {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] msical_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for usage, configuration and input errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "msical", version, about = "Multi-signal wavelet-variance calibration of inertial sensors")]
pub struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate replicates from a model file.
    Simulate(SimulateArgs),
    /// Empirical wavelet variance of each signal.
    Wv(WvArgs),
    /// Fit a model template to one or more signals.
    Fit(FitArgs),
    /// Parametric-bootstrap near-stationarity test.
    Test(TestArgs),
    /// Monte Carlo simulation study from a config file.
    Study(StudyArgs),
    /// Navigation evaluation from a config file.
    Naveval(NavevalArgs),
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct SimulateArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub length: usize,
    #[arg(long = "reps", default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rate_hz: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `f64le` (with JSON sidecar) or `csv`.
    #[arg(long, default_value = "f64le")]
    pub format: String,
    /// Output directory; not part of the manifest.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Options shared by commands that read signals.
#[derive(Debug, Args, Clone, Serialize)]
pub struct SignalArgs {
    #[arg(required = true)]
    pub signals: Vec<PathBuf>,
    /// Sampling rate assumed for CSV signals.
    #[arg(long, default_value_t = 1.0)]
    pub rate_hz: f64,
    /// Number of scales (default: largest common default).
    #[arg(long = "scales")]
    pub scales: Option<usize>,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct WvArgs {
    #[command(flatten)]
    pub input: SignalArgs,
    #[arg(long = "ci", default_value_t = 0.95)]
    pub ci: f64,
    /// Moving-block bootstrap resamples for the covariance (0: chi-squared
    /// diagonal).
    #[arg(long = "boot", default_value_t = 0)]
    pub boot: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; not part of the manifest.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: SignalArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "awv")]
    pub method: String,
    #[arg(long, default_value = "identity")]
    pub omega: String,
    /// Comma-separated user constants `d_i` (default: all ones).
    #[arg(long = "d", value_delimiter = ',')]
    pub d: Vec<f64>,
    /// Bootstrap resamples for the WV covariances used by Ω and the
    /// sandwich covariance (0: chi-squared diagonal).
    #[arg(long = "boot", default_value_t = 100)]
    pub boot: usize,
    #[arg(long, default_value_t = 10)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; not part of the manifest.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct TestArgs {
    #[command(flatten)]
    pub input: SignalArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "nboot", default_value_t = 99)]
    pub nboot: usize,
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; not part of the manifest.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct StudyArgs {
    pub config: PathBuf,
    /// Overrides the seed of the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; not part of the manifest.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct NavevalArgs {
    pub config: PathBuf,
    /// Overrides the seed of the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; not part of the manifest.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Either a full synthetic study (models fitted from replicates drawn from
/// G) or explicit models evaluated on recorded noise files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NavevalConfig {
    Study(NavStudyConfig),
    Direct(DirectNavConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectNavConfig {
    #[serde(default)]
    pub scenario: NavScenario,
    pub models: Vec<NamedModel>,
    /// Gyro noise files, read at the IMU rate of the scenario.
    pub sources: Vec<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectNavReport {
    pub models: Vec<NamedModel>,
    pub metrics: NavMetrics,
}

/// `MSICAL_SEED` if set, else `flag`.
pub fn resolve_seed(flag: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn resolve_optional_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    resolve_seed(flag.unwrap_or(config))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_artifact<T: Serialize>(path: &Path, manifest: &RunManifest, result: &T) -> CliResult<()> {
    write_json(path, &Artifact { manifest: manifest.clone(), result })
}

fn csv_file(path: &Path) -> CliResult<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn read_signals(args: &SignalArgs) -> CliResult<Vec<Replicate>> {
    args.signals
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(CliError::Input(format!("{}: no such file", p.display())));
            }
            Ok(read_replicate(p, args.rate_hz)?)
        })
        .collect()
}

fn input_paths(args: &SignalArgs) -> Vec<&Path> {
    args.signals.iter().map(PathBuf::as_path).collect()
}

fn scales_for(args: &SignalArgs, signals: &[Replicate]) -> usize {
    args.scales
        .unwrap_or_else(|| common_scales(&signals.iter().map(Replicate::len).collect::<Vec<_>>()))
}

fn wv_options(ci: f64, boot: usize, key: StreamKey) -> WvOptions {
    if boot == 0 {
        WvOptions {
            ci_level: ci,
            bootstrap: None,
        }
    } else {
        WvOptions {
            ci_level: ci,
            ..WvOptions::with_bootstrap(boot, key)
        }
    }
}

/// WV of every signal; signal `i` bootstraps on stream `key.child(i)`.
fn estimate_all(
    signals: &[Replicate],
    j: usize,
    ci: f64,
    boot: usize,
    key: StreamKey,
) -> CliResult<Vec<WVEstimate>> {
    signals
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(estimate_wv(s, j, &wv_options(ci, boot, key.child(i as u64)))?))
        .collect()
}

fn output_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<Vec<PathBuf>> {
    let seed = resolve_seed(args.seed)?;
    let model: CompositeModel = read_json(&args.model)?;
    let csv_format = match args.format.as_str() {
        "f64le" => false,
        "csv" => true,
        other => return Err(CliError::Usage(format!("unknown format {other:?}"))),
    };
    let resolved = SimulateArgs { seed, ..args.clone() };
    let manifest = RunManifest::new("simulate", &resolved, seed, &[&args.model])?;
    if args.reps == 0 {
        return Ok(Vec::new());
    }
    output_dir(&args.out)?;
    let key = StreamKey::new(seed);
    let mut written = Vec::new();
    for i in 0..args.reps {
        let mut rep = simulate_path(&model, args.length, key.child(i as u64))?;
        rep.rate_hz = args.rate_hz;
        if csv_format {
            let path = args.out.join(format!("rep_{i:03}.csv"));
            write_csv(&path, &rep)?;
            written.push(path);
        } else {
            let path = args.out.join(format!("rep_{i:03}.f64"));
            write_f64le(&path, &rep, Some(serde_json::to_value(&manifest)?))?;
            written.push(path);
        }
    }
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(written)
}

pub fn cmd_wv(args: &WvArgs) -> CliResult<Vec<WVEstimate>> {
    let seed = resolve_seed(args.seed)?;
    let signals = read_signals(&args.input)?;
    let j = scales_for(&args.input, &signals);
    let resolved = WvArgs {
        seed,
        input: SignalArgs {
            scales: Some(j),
            ..args.input.clone()
        },
        ..args.clone()
    };
    let manifest = RunManifest::new("wv", &resolved, seed, &input_paths(&args.input))?;
    let wvs = estimate_all(&signals, j, args.ci, args.boot, StreamKey::new(seed))?;
    output_dir(&args.out)?;
    for (i, (s, wv)) in signals.iter().zip(&wvs).enumerate() {
        let stem = format!("{i:03}_{}", s.label);
        write_artifact(&args.out.join(format!("{stem}.wv.json")), &manifest, wv)?;
        wv.write_csv(csv_file(&args.out.join(format!("{stem}.wv.csv")))?)?;
    }
    Ok(wvs)
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<msical_core::FitResult> {
    let seed = resolve_seed(args.seed)?;
    let method: Method = args.method.parse()?;
    let mode: OmegaMode = args.omega.parse()?;
    let template: CompositeModel = read_json(&args.model)?;
    let signals = read_signals(&args.input)?;
    let j = scales_for(&args.input, &signals);
    let d = if args.d.is_empty() {
        vec![1.0; signals.len()]
    } else {
        args.d.clone()
    };
    let resolved = FitArgs {
        seed,
        d: d.clone(),
        input: SignalArgs {
            scales: Some(j),
            ..args.input.clone()
        },
        ..args.clone()
    };
    let mut inputs = input_paths(&args.input);
    inputs.push(&args.model);
    let manifest = RunManifest::new("fit", &resolved, seed, &inputs)?;

    let key = StreamKey::new(seed).child(0x0077_7600);
    let wvs = estimate_all(&signals, j, 0.95, args.boot, key)?;
    let lengths: Vec<usize> = signals.iter().map(Replicate::len).collect();
    let weights = compute_weights(&lengths, &d)?;
    let spec = resolve_omega(&wvs, &weights, mode)?;
    let opts = FitOptions {
        n_starts: args.starts,
        seed,
        ..FitOptions::default()
    };
    let result = fit(method, &wvs, &template, &spec, &opts)?;
    output_dir(&args.out)?;
    write_artifact(&args.out.join("fit.json"), &manifest, &result)?;
    write_fit_csv(&result, csv_file(&args.out.join("fit.csv"))?)?;
    Ok(result)
}

fn write_fit_csv<W: std::io::Write>(r: &msical_core::FitResult, out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "estimate", "se"])?;
    for (i, (label, v)) in r.parameter_labels.iter().zip(r.theta_hat.flatten()).enumerate() {
        let se = r
            .lambda_hat
            .as_ref()
            .map_or(f64::NAN, |l| l[(i, i)].max(0.0).sqrt());
        w.write_record([label.clone(), v.to_string(), se.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_test(args: &TestArgs) -> CliResult<msical_core::inference::TestResult> {
    let seed = resolve_seed(args.seed)?;
    let template: CompositeModel = read_json(&args.model)?;
    let signals = read_signals(&args.input)?;
    let j = scales_for(&args.input, &signals);
    let resolved = TestArgs {
        seed,
        input: SignalArgs {
            scales: Some(j),
            ..args.input.clone()
        },
        ..args.clone()
    };
    let mut inputs = input_paths(&args.input);
    inputs.push(&args.model);
    let manifest = RunManifest::new("test", &resolved, seed, &inputs)?;
    let wvs = estimate_all(&signals, j, 0.95, 0, StreamKey::new(seed))?;
    let lengths: Vec<usize> = signals.iter().map(Replicate::len).collect();
    let weights = compute_weights(&lengths, &vec![1.0; lengths.len()])?;
    let spec = resolve_omega(&wvs, &weights, OmegaMode::Identity)?;
    let result = near_stationarity_test(&wvs, &template, &spec, &TestOptions::new(args.nboot, args.level, seed))?;
    output_dir(&args.out)?;
    write_artifact(&args.out.join("test.json"), &manifest, &result)?;
    let mut w = csv::Writer::from_writer(csv_file(&args.out.join("test.csv"))?);
    w.write_record(["kind", "statistic"])?;
    w.write_record(["observed".to_string(), result.statistic_observed.to_string()])?;
    for s in &result.bootstrap_statistics {
        w.write_record(["bootstrap".to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(result)
}

pub fn cmd_study(args: &StudyArgs) -> CliResult<msical_core::experiments::StudyReport> {
    let mut cfg: StudyConfig = read_json(&args.config)?;
    cfg.seed = resolve_optional_seed(args.seed, cfg.seed)?;
    cfg.validate()?;
    let manifest = RunManifest::new("study", &cfg, cfg.seed, &[&args.config])?;
    let report = run_simulation_study(&cfg)?;
    output_dir(&args.out)?;
    write_artifact(&args.out.join("study.json"), &manifest, &report)?;
    report.write_estimates_csv(csv_file(&args.out.join("estimates.csv"))?)?;
    report.write_summary_csv(csv_file(&args.out.join("summary.csv"))?)?;
    Ok(report)
}

pub fn cmd_naveval(args: &NavevalArgs) -> CliResult<NavMetrics> {
    let mut cfg: NavevalConfig = read_json(&args.config)?;
    let mut inputs: Vec<PathBuf> = vec![args.config.clone()];
    let (seed, metrics, manifest, result) = match &mut cfg {
        NavevalConfig::Study(c) => {
            c.seed = resolve_optional_seed(args.seed, c.seed)?;
            c.validate()?;
            let manifest = RunManifest::new("naveval", &NavevalConfig::Study(c.clone()), c.seed, &[&args.config])?;
            let report = run_nav_study(c)?;
            (c.seed, report.metrics.clone(), manifest, serde_json::to_value(&report)?)
        }
        NavevalConfig::Direct(c) => {
            c.seed = resolve_optional_seed(args.seed, c.seed)?;
            c.scenario.validate()?;
            inputs.extend(c.sources.iter().cloned());
            let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let manifest = RunManifest::new("naveval", &NavevalConfig::Direct(c.clone()), c.seed, &paths)?;
            let sources = c
                .sources
                .iter()
                .map(|p| Ok(read_replicate(p, c.scenario.imu_rate_hz)?))
                .collect::<CliResult<Vec<_>>>()?;
            let metrics = nav_eval(&c.scenario, &c.models, &sources, c.seed)?;
            let report = DirectNavReport {
                models: c.models.clone(),
                metrics: metrics.clone(),
            };
            (c.seed, metrics, manifest, serde_json::to_value(&report)?)
        }
    };
    log::info!("navigation evaluation done (seed {seed})");
    output_dir(&args.out)?;
    write_artifact(&args.out.join("nav.json"), &manifest, &result)?;
    metrics.write_csv(csv_file(&args.out.join("nav.csv"))?)?;
    Ok(metrics)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // Fails only if a global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).map(drop),
        Command::Wv(a) => cmd_wv(a).map(drop),
        Command::Fit(a) => cmd_fit(a).map(drop),
        Command::Test(a) => cmd_test(a).map(drop),
        Command::Study(a) => cmd_study(a).map(drop),
        Command::Naveval(a) => cmd_naveval(a).map(drop),
    }
}
