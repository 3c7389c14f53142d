//! Command-line front end.
//!
//! Data goes to `--out` (or stdout); diagnostics and errors go to stderr.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::baselines::{em_fit, iw_filter, iw_fit, kalman_run, EmOptions, IW_BRACKET};
use crate::bench::{gen_cov, run_benchmark, simulate_llm, true_w, BenchConfig, BenchModel, CovGenParams, GiwWSource};
use crate::chart::{chart_run, mould_series, ChartConfig, EwmaStart, Target, MOULD_PHASE1_END};
use crate::error::{Error, Result};
use crate::filter::{
    filter_init, msse, run_filter, FilterOptions, ForecastRecord, GainMode, ModelConfig, SigmaEstimator,
    Standardization, WSpec,
};
use crate::giw::{giw_det_moment, giw_log_density, giw_mode, giw_moments, GiwParams};
use crate::hyperparam::NrSettings;
use crate::io::{column_names, config_to_args, format_series, parse_config, read_matrix, read_series, ConfigEcho};
use crate::matrix::{fmt_f64, format_matrix_csv, vech, Mat, SpdMatrix, Vector};
use crate::volatility::{format_vech_path, run_vol_filter, simulate_vol_llm, simulate_vol_path, vol_constants};

const GLOBAL_KEYS: &[&str] = &["seed", "format"];
const COMMANDS: &[&str] = &["simulate", "fit", "baseline", "bench", "chart", "giw"];

#[derive(Debug, Parser)]
#[command(name = "gilevel", version, about = "On-line covariance learning for the multivariate local level model")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Random seed.
    #[arg(long, global = true, env = "GILEVEL_SEED")]
    pub seed: Option<u64>,
    /// Output file (stdout when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// key=value file supplying defaults (`seed=7`, `fit.phi=1`); explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a local level series with random covariances.
    Simulate(SimulateArgs),
    /// Run the GIW filter.
    Fit(FitArgs),
    /// Run a baseline estimator.
    Baseline(BaselineArgs),
    /// Monte Carlo MSSE benchmark.
    Bench(BenchArgs),
    /// Log Bayes factor EWMA control chart.
    Chart(ChartArgs),
    /// Evaluate GIW density, mode and moments.
    Giw(GiwArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    /// Volatility discount; simulates an evolving Σ_t when given.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Prefix for truth files (`PREFIX.sigma.csv`, `PREFIX.omega.csv`, `PREFIX.w.csv`).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Tilde,
    Mode,
    Guarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GainArg {
    Steady,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StandardizationArg {
    Spread,
    Conditional,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("w").required(true).args(["w_file", "discounts", "estimate_w"])))]
pub struct FitArgs {
    /// Series CSV.
    pub input: PathBuf,
    /// `W` as a dense CSV matrix.
    #[arg(long)]
    pub w_file: Option<PathBuf>,
    /// One discount factor per component.
    #[arg(long, value_delimiter = ',')]
    pub discounts: Option<Vec<f64>>,
    /// Estimate `W` by Newton-Raphson.
    #[arg(long)]
    pub estimate_w: bool,
    /// Rows used to estimate `W` (0 means all).
    #[arg(long, default_value_t = 0, requires = "estimate_w")]
    pub calibration: usize,
    /// Re-estimate `W` every this many steps from the data seen so far.
    #[arg(long, requires = "estimate_w")]
    pub reestimate_every: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.01)]
    pub n0: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub p0: f64,
    /// `S_0` as a dense CSV matrix (identity when absent).
    #[arg(long)]
    pub s0_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Mode)]
    pub estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = GainArg::Steady)]
    pub gain: GainArg,
    #[arg(long, value_enum, default_value_t = StandardizationArg::Spread)]
    pub standardization: StandardizationArg,
    /// Volatility discount for the evolving-covariance filter.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Writes the `Σ̃_t` path as vech rows.
    #[arg(long)]
    pub sigma_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineModel {
    Kalman,
    Iw,
    Em,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: BaselineModel,
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    /// `Σ` for the Kalman filter.
    #[arg(long, required_if_eq("model", "kalman"))]
    pub sigma_file: Option<PathBuf>,
    /// `Ω` for the Kalman filter.
    #[arg(long, required_if_eq("model", "kalman"))]
    pub omega_file: Option<PathBuf>,
    /// Initial state variance scale for the Kalman filter.
    #[arg(long, default_value_t = 1000.0)]
    pub p0: f64,
    /// Fixed `w` for the inverse Wishart filter (fitted when absent).
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub n0: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub em_tol: f64,
    #[arg(long, default_value_t = 500)]
    pub em_max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WSourceArg {
    Estimate,
    Truth,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Full grid cell (p = 100, N = 1000, 100 replications).
    #[arg(long)]
    pub large: bool,
    /// Add per-replication wall times (makes the report non-reproducible).
    #[arg(long)]
    pub timings: bool,
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub giw_w: Option<WSourceArg>,
    #[arg(long)]
    pub phi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StartArg {
    PhaseOneMean,
    FirstValue,
}

#[derive(Debug, Args)]
pub struct ChartArgs {
    /// Series CSV; a synthetic 276 x 5 series is generated when absent.
    pub input: Option<PathBuf>,
    /// Last Phase I index (half the series when absent).
    #[arg(long)]
    pub phase1_end: Option<usize>,
    #[arg(long, default_value_t = ChartConfig::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = ChartConfig::DEFAULT_L)]
    pub limit_multiplier: f64,
    /// Target mean (Phase I sample mean when absent).
    #[arg(long, value_delimiter = ',')]
    pub target_mean: Option<Vec<f64>>,
    /// Target covariance CSV (Phase I sample covariance when absent).
    #[arg(long)]
    pub target_cov: Option<PathBuf>,
    /// `W = w I` for the chart's filter.
    #[arg(long, default_value_t = 0.01)]
    pub w_scale: f64,
    #[arg(long, value_enum, default_value_t = StartArg::PhaseOneMean)]
    pub start: StartArg,
    #[arg(long)]
    pub audit_phase1: bool,
    /// Writes `t,H,Z,center,lcl,ucl,signal` without header comments.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GiwArgs {
    #[arg(long)]
    pub n: f64,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub s: PathBuf,
    /// Evaluate the log density at this matrix.
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Order of the determinant moment `E|X|^ℓ`.
    #[arg(long)]
    pub ell: Option<f64>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Splices `--config` entries in right after the subcommand so that explicit
/// flags, which come later, take precedence.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config_path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config_path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        }
    }
    let Some(path) = config_path else {
        return Ok(args);
    };
    let Some(cmd_pos) = strs.iter().position(|a| COMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let entries = parse_config(&fs::read_to_string(&path)?)?;
    let extra = config_to_args(&entries, &strs[cmd_pos], GLOBAL_KEYS);
    let mut out: Vec<OsString> = args[..=cmd_pos].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&args[cmd_pos + 1..]);
    Ok(out)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut echo = ConfigEcho::new(command_name(&cli.command));
    echo.push("seed", seed).push("format", format_name(cli.format));
    let output = match &cli.command {
        Command::Simulate(a) => simulate(a, seed, cli, &mut echo)?,
        Command::Fit(a) => fit(a, cli, &mut echo)?,
        Command::Baseline(a) => baseline(a, &mut echo)?,
        Command::Bench(a) => bench(a, seed, cli, &mut echo)?,
        Command::Chart(a) => chart(a, seed, &mut echo)?,
        Command::Giw(a) => giw(a, &mut echo)?,
    };
    emit(cli, &echo, output)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Fit(_) => "fit",
        Command::Baseline(_) => "baseline",
        Command::Bench(_) => "bench",
        Command::Chart(_) => "chart",
        Command::Giw(_) => "giw",
    }
}

fn format_name(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

/// A command's result in both output formats. `results` are `result.*`
/// header lines in CSV.
struct Output {
    csv_body: String,
    results: Vec<(String, String)>,
    json: Value,
}

fn emit(cli: &Cli, echo: &ConfigEcho, output: Output) -> Result<()> {
    let text = match cli.format {
        Format::Csv => {
            let mut header = echo.clone();
            for (k, v) in &output.results {
                header.push(&format!("result.{k}"), v);
            }
            header.to_header() + &output.csv_body
        }
        Format::Json => {
            let doc = json!({ "config": echo.to_json(), "result": output.json });
            serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))? + "\n"
        }
    };
    match &cli.out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn progress(cli: &Cli, msg: &str) {
    if !cli.quiet {
        eprintln!("{msg}");
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn mat_json(m: &Mat) -> Value {
    Value::Array((0..m.nrows()).map(|i| json!(m.row(i).iter().copied().collect::<Vec<f64>>())).collect())
}

fn vec_json(v: &Vector) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn vech_str(m: &Mat) -> String {
    vech(m).iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

fn vec_str(v: &Vector) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn read_square(path: &Path, p: usize, what: &str) -> Result<SpdMatrix> {
    let m = read_matrix(path)?;
    if m.shape() != (p, p) {
        return Err(Error::Config(format!("{what} in {} is {}x{}, expected {p}x{p}", path.display(), m.nrows(), m.ncols())));
    }
    SpdMatrix::new(m)
}

fn simulate(a: &SimulateArgs, seed: u64, cli: &Cli, echo: &mut ConfigEcho) -> Result<Output> {
    if a.p == 0 || a.n == 0 {
        return Err(Error::Config("p and n must be positive".into()));
    }
    echo.push("simulate.p", a.p).push("simulate.n", a.n).push("simulate.phi", a.phi);
    if let Some(d) = a.delta {
        echo.push("simulate.delta", d);
    }
    if let Some(t) = &a.truth {
        echo.push("simulate.truth", path_str(t));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CovGenParams::default();
    let sigma = gen_cov(a.p, &params, &mut rng)?.into_inner();
    let omega = gen_cov(a.p, &params, &mut rng)?.into_inner();
    let w = true_w(&sigma, &omega)?;
    let (data, path) = match a.delta {
        None => (simulate_llm(&sigma, &omega, a.phi, a.n, &Vector::zeros(a.p), &mut rng)?, None),
        Some(d) => {
            let consts = vol_constants(d, a.p)?;
            let path = simulate_vol_path(&sigma, &consts, a.n, &mut rng)?;
            (simulate_vol_llm(&path, &w, a.phi, &mut rng)?, Some(path))
        }
    };
    if let Some(prefix) = &a.truth {
        let file = |suffix: &str| PathBuf::from(format!("{}.{suffix}", prefix.display()));
        fs::write(file("sigma.csv"), format_matrix_csv(&sigma))?;
        fs::write(file("omega.csv"), format_matrix_csv(&omega))?;
        fs::write(file("w.csv"), format_matrix_csv(&w))?;
        if let Some(path) = &path {
            fs::write(file("sigma_path.csv"), format_vech_path(path))?;
        }
        progress(cli, &format!("truth written to {}.*.csv", prefix.display()));
    }
    let mut json = json!({
        "series": data.iter().map(vec_json).collect::<Vec<_>>(),
        "sigma": mat_json(&sigma),
        "omega": mat_json(&omega),
        "w": mat_json(&w),
    });
    if let Some(path) = &path {
        json["sigma_path"] = Value::Array(path.iter().map(mat_json).collect());
    }
    Ok(Output {
        csv_body: format_series(&data, Some(&column_names("y", a.p))),
        results: vec![],
        json,
    })
}

fn records_csv(records: &[ForecastRecord], p: usize) -> String {
    let mut header = vec!["t".to_string(), "dof".into(), "log_pred".into()];
    header.extend(column_names("f", p));
    header.extend(column_names("e", p));
    header.extend(column_names("z", p));
    let mut out = header.join(",") + "\n";
    for r in records {
        let mut row = vec![r.t.to_string(), fmt_f64(r.dof), fmt_f64(r.log_pred)];
        for v in [&r.location, &r.error, &r.std_error] {
            row.extend(v.iter().map(|x| fmt_f64(*x)));
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

fn records_json(records: &[ForecastRecord]) -> Value {
    Value::Array(
        records
            .iter()
            .map(|r| {
                json!({
                    "t": r.t,
                    "dof": r.dof,
                    "log_pred": r.log_pred,
                    "forecast": vec_json(&r.location),
                    "error": vec_json(&r.error),
                    "std_error": vec_json(&r.std_error),
                })
            })
            .collect(),
    )
}

fn fit(a: &FitArgs, cli: &Cli, echo: &mut ConfigEcho) -> Result<Output> {
    let data = read_series(&a.input)?;
    let p = data[0].len();
    echo.push("fit.input", path_str(&a.input));
    let w_spec = if let Some(path) = &a.w_file {
        echo.push("fit.w-file", path_str(path));
        WSpec::Fixed(read_square(path, p, "W")?)
    } else if let Some(d) = &a.discounts {
        echo.push("fit.discounts", join(d));
        WSpec::Discounts(d.clone())
    } else {
        let settings = NrSettings::default();
        echo.push("fit.estimate-w", true).push("fit.calibration", a.calibration);
        if let Some(k) = a.reestimate_every {
            echo.push("fit.reestimate-every", k);
        }
        WSpec::EstimateNr {
            settings,
            calibration: a.calibration,
            reestimate_every: a.reestimate_every,
        }
    };
    let s0 = match &a.s0_file {
        Some(path) => {
            echo.push("fit.s0-file", path_str(path));
            read_square(path, p, "S0")?
        }
        None => SpdMatrix::identity(p),
    };
    let options = FilterOptions {
        estimator: match a.estimator {
            EstimatorArg::Tilde => SigmaEstimator::Tilde,
            EstimatorArg::Mode => SigmaEstimator::Mode,
            EstimatorArg::Guarded => SigmaEstimator::Guarded,
        },
        standardization: match a.standardization {
            StandardizationArg::Spread => Standardization::Spread,
            StandardizationArg::Conditional => Standardization::Conditional,
        },
        gain: match a.gain {
            GainArg::Steady => GainMode::SteadyState,
            GainArg::Exact => GainMode::Exact,
        },
    };
    echo.push("fit.phi", a.phi)
        .push("fit.n0", a.n0)
        .push("fit.p0", a.p0)
        .push("fit.estimator", a.estimator.to_possible_value().expect("value").get_name())
        .push("fit.gain", a.gain.to_possible_value().expect("value").get_name())
        .push("fit.standardization", a.standardization.to_possible_value().expect("value").get_name());
    if let Some(path) = &a.sigma_out {
        echo.push("fit.sigma-out", path_str(path));
    }
    let config = ModelConfig {
        phi: a.phi,
        m0: Vector::zeros(p),
        p0: a.p0,
        n0: a.n0,
        s0,
        w_spec,
        options,
    };
    progress(cli, &format!("fit: {} observations, p = {p}", data.len()));
    let (records, sigma_path, w, final_state) = match a.delta {
        None => {
            let out = run_filter(&config, &data)?;
            (out.records, out.sigma_path, out.w, out.final_state)
        }
        Some(d) => {
            echo.push("fit.delta", d);
            let w = match &config.w_spec {
                WSpec::EstimateNr { settings, calibration, .. } => {
                    let len = if *calibration == 0 { data.len() } else { (*calibration).min(data.len()) };
                    crate::filter::estimate_w(&data[..len], &config, settings)?
                }
                _ => config.resolve_w()?,
            };
            let consts = vol_constants(d, p)?;
            let state = filter_init(&config, &w)?;
            let (records, path, state) = run_vol_filter(state, &data, &consts)?;
            (records, path, w.into_inner(), state)
        }
    };
    if let Some(path) = &a.sigma_out {
        fs::write(path, format_vech_path(&sigma_path))?;
    }
    let (m, missing) = msse(&records);
    let loglik: f64 = records.iter().map(|r| r.log_pred).sum();
    let results = vec![
        ("msse".to_string(), vec_str(&m)),
        ("missing".to_string(), missing.to_string()),
        ("loglik".to_string(), fmt_f64(loglik)),
        ("w_vech".to_string(), vech_str(&w)),
        ("sigma_final_vech".to_string(), vech_str(&final_state.sigma_tilde)),
    ];
    let json = json!({
        "msse": vec_json(&m),
        "missing": missing,
        "loglik": loglik,
        "w": mat_json(&w),
        "sigma_final": mat_json(&final_state.sigma_tilde),
        "records": records_json(&records),
    });
    Ok(Output {
        csv_body: records_csv(&records, p),
        results,
        json,
    })
}

fn baseline(a: &BaselineArgs, echo: &mut ConfigEcho) -> Result<Output> {
    let data = read_series(&a.input)?;
    let p = data[0].len();
    echo.push("baseline.input", path_str(&a.input))
        .push("baseline.model", a.model.to_possible_value().expect("value").get_name())
        .push("baseline.phi", a.phi);
    let zeros = Vector::zeros(p);
    let mut results = Vec::new();
    let mut extra = serde_json::Map::new();
    let records = match a.model {
        BaselineModel::Kalman => {
            let (sf, of) = (a.sigma_file.as_ref(), a.omega_file.as_ref());
            let (sf, of) = sf.zip(of).ok_or_else(|| Error::Config("kalman needs --sigma-file and --omega-file".into()))?;
            echo.push("baseline.sigma-file", path_str(sf))
                .push("baseline.omega-file", path_str(of))
                .push("baseline.p0", a.p0);
            let sigma = read_square(sf, p, "Σ")?.into_inner();
            let omega = read_square(of, p, "Ω")?.into_inner();
            let out = kalman_run(&data, &sigma, &omega, a.phi, &zeros, &(Mat::identity(p, p) * a.p0))?;
            results.push(("loglik".into(), fmt_f64(out.loglik)));
            extra.insert("loglik".into(), json!(out.loglik));
            out.records
        }
        BaselineModel::Iw => {
            echo.push("baseline.n0", a.n0);
            let s0 = Mat::identity(p, p);
            let (out, w) = match a.w {
                Some(w) => {
                    echo.push("baseline.w", w);
                    (iw_filter(&data, w, a.phi, &zeros, a.n0, &s0)?, w)
                }
                None => {
                    let fit = iw_fit(&data, a.phi, a.n0, &s0, IW_BRACKET)?;
                    (fit.output, fit.w_hat)
                }
            };
            results.push(("w".into(), fmt_f64(w)));
            results.push(("loglik".into(), fmt_f64(out.loglik)));
            extra.insert("w".into(), json!(w));
            extra.insert("loglik".into(), json!(out.loglik));
            out.records
        }
        BaselineModel::Em => {
            echo.push("baseline.em-tol", a.em_tol).push("baseline.em-max-iter", a.em_max_iter);
            let options = EmOptions {
                tol: a.em_tol,
                max_iter: a.em_max_iter,
                ..EmOptions::default()
            };
            let fit = em_fit(&data, a.phi, &options)?;
            let out = kalman_run(&data, &fit.sigma_hat, &fit.omega_hat, a.phi, &fit.m0, &fit.c0)?;
            results.push(("sigma_vech".into(), vech_str(&fit.sigma_hat)));
            results.push(("omega_vech".into(), vech_str(&fit.omega_hat)));
            results.push(("iterations".into(), fit.iterations.to_string()));
            results.push(("converged".into(), fit.converged.to_string()));
            results.push(("loglik".into(), fmt_f64(out.loglik)));
            extra.insert("sigma".into(), mat_json(&fit.sigma_hat));
            extra.insert("omega".into(), mat_json(&fit.omega_hat));
            extra.insert("iterations".into(), json!(fit.iterations));
            extra.insert("converged".into(), json!(fit.converged));
            extra.insert("loglik_trace".into(), json!(fit.loglik_trace));
            out.records
        }
    };
    let (m, missing) = msse(&records);
    results.insert(0, ("msse".into(), vec_str(&m)));
    results.insert(1, ("missing".into(), missing.to_string()));
    extra.insert("msse".into(), vec_json(&m));
    extra.insert("missing".into(), json!(missing));
    extra.insert("records".into(), records_json(&records));
    Ok(Output {
        csv_body: records_csv(&records, p),
        results,
        json: Value::Object(extra),
    })
}

fn bench(a: &BenchArgs, seed: u64, cli: &Cli, echo: &mut ConfigEcho) -> Result<Output> {
    let mut config = if a.large { BenchConfig::large(seed) } else { BenchConfig::desk(seed) };
    if let Some(p) = a.p {
        config.p = p;
    }
    if let Some(n) = a.n {
        config.n = n;
    }
    if let Some(r) = a.reps {
        config.replications = r;
    }
    if let Some(phi) = a.phi {
        config.phi = phi;
    }
    if let Some(src) = a.giw_w {
        config.giw_w = match src {
            WSourceArg::Estimate => GiwWSource::Estimate,
            WSourceArg::Truth => GiwWSource::Truth,
        };
    }
    if let Some(models) = &a.models {
        config.models = models
            .iter()
            .map(|m| m.parse::<BenchModel>())
            .collect::<Result<Vec<_>>>()?;
    }
    let models: Vec<&str> = config.models.iter().map(|m| m.name()).collect();
    echo.push("bench.p", config.p)
        .push("bench.N", config.n)
        .push("bench.reps", config.replications)
        .push("bench.phi", config.phi)
        .push(
            "bench.giw-w",
            match config.giw_w {
                GiwWSource::Estimate => "estimate",
                GiwWSource::Truth => "truth",
            },
        )
        .push("bench.models", models.join(","))
        .push("bench.timings", a.timings);
    progress(
        cli,
        &format!("bench: p = {}, N = {}, {} replications", config.p, config.n, config.replications),
    );
    let report = run_benchmark(&config, a.timings)?;
    progress(cli, report.to_table().trim_end());
    let mut results = Vec::new();
    for m in &report.models {
        let name = m.model.name();
        results.push((format!("{name}.mean_msse"), fmt_f64(m.mean_msse)));
        results.push((format!("{name}.std_error"), fmt_f64(m.std_error)));
        results.push((format!("{name}.failures"), m.failures.to_string()));
    }
    let json = serde_json::to_value(&report).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Output {
        csv_body: report.to_csv(),
        results,
        json,
    })
}

fn sample_mean_cov(data: &[Vector]) -> (Vector, Mat) {
    let p = data[0].len();
    let n = data.len() as f64;
    let mean = data.iter().fold(Vector::zeros(p), |acc, y| acc + y) / n;
    let mut cov = Mat::zeros(p, p);
    for y in data {
        let d = y - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    (mean, cov / (n - 1.0))
}

fn chart(a: &ChartArgs, seed: u64, echo: &mut ConfigEcho) -> Result<Output> {
    let (data, default_target, default_end) = match &a.input {
        Some(path) => {
            echo.push("chart.input", path_str(path));
            let data = read_series(path)?;
            let end = data.len() / 2;
            (data, None, end)
        }
        None => {
            let (data, target) = mould_series(&mut ChaCha8Rng::seed_from_u64(seed));
            (data, Some(target), MOULD_PHASE1_END)
        }
    };
    let p = data[0].len();
    let phase1_end = a.phase1_end.unwrap_or(default_end);
    if phase1_end < 2 || phase1_end > data.len() {
        return Err(Error::Config(format!("phase1_end {phase1_end} is outside the series")));
    }
    let target = match (&a.target_mean, &a.target_cov, default_target) {
        (None, None, Some(t)) => t,
        (mean, cov, _) => {
            let (m_hat, c_hat) = sample_mean_cov(&data[..phase1_end]);
            let mean = match mean {
                Some(m) => {
                    echo.push("chart.target-mean", join(m));
                    Vector::from_column_slice(m)
                }
                None => m_hat,
            };
            let cov = match cov {
                Some(path) => {
                    echo.push("chart.target-cov", path_str(path));
                    read_square(path, p, "target covariance")?
                }
                None => SpdMatrix::new(c_hat)?,
            };
            Target::new(mean, cov)?
        }
    };
    echo.push("chart.phase1-end", phase1_end)
        .push("chart.lambda", a.lambda)
        .push("chart.limit-multiplier", a.limit_multiplier)
        .push("chart.w-scale", a.w_scale)
        .push("chart.start", a.start.to_possible_value().expect("value").get_name())
        .push("chart.audit-phase1", a.audit_phase1);
    if let Some(path) = &a.plot_data {
        echo.push("chart.plot-data", path_str(path));
    }
    if !(a.w_scale > 0.0) {
        return Err(Error::Config("w-scale must be positive".into()));
    }
    let mut model = ModelConfig::local_level(p, WSpec::Fixed(SpdMatrix::scaled_identity(p, a.w_scale)));
    model.m0 = target.mean().clone();
    model.s0 = target.cov().clone();
    let mut config = ChartConfig::new(target, phase1_end);
    config.lambda = a.lambda;
    config.limit_multiplier = a.limit_multiplier;
    config.audit_phase1 = a.audit_phase1;
    config.start = match a.start {
        StartArg::PhaseOneMean => EwmaStart::PhaseOneMean,
        StartArg::FirstValue => EwmaStart::FirstValue,
    };
    let report = chart_run(&data, &config, &model)?;
    let csv = report.to_csv();
    if let Some(path) = &a.plot_data {
        fs::write(path, &csv)?;
    }
    let signals = report.signals.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    let results = vec![
        ("center".to_string(), fmt_f64(report.center)),
        ("lcl".to_string(), fmt_f64(report.lcl)),
        ("ucl".to_string(), fmt_f64(report.ucl)),
        ("z0".to_string(), fmt_f64(report.z0)),
        ("signals".to_string(), signals),
    ];
    let json = serde_json::to_value(&report).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Output {
        csv_body: csv,
        results,
        json,
    })
}

fn giw(a: &GiwArgs, echo: &mut ConfigEcho) -> Result<Output> {
    echo.push("giw.n", a.n).push("giw.a", path_str(&a.a)).push("giw.s", path_str(&a.s));
    let am = read_matrix(&a.a)?;
    let p = am.nrows();
    let params = GiwParams::new(a.n, SpdMatrix::new(am)?, read_square(&a.s, p, "S")?)?;
    let mut body = String::from("quantity,i,j,value\n");
    let mut json = serde_json::Map::new();
    let mut scalar = |body: &mut String, name: &str, v: f64| {
        let _ = writeln!(body, "{name},,,{}", fmt_f64(v));
        json.insert(name.to_string(), json!(v));
    };
    if let Some(x) = &a.x {
        echo.push("giw.x", path_str(x));
        let xm = read_square(x, p, "X")?;
        scalar(&mut body, "log_density", giw_log_density(&xm, &params)?);
    }
    if let Some(ell) = a.ell {
        echo.push("giw.ell", ell);
        scalar(&mut body, "det_moment", giw_det_moment(&params, ell)?);
    }
    let mut matrices = vec![("mode", giw_mode(&params)?)];
    match giw_moments(&params) {
        Ok(m) => {
            matrices.push(("e_quad", m.e_quad));
            matrices.push(("e_inv_quad", m.e_inv_quad));
        }
        Err(e) => {
            let _ = writeln!(body, "# moments unavailable: {e}");
        }
    }
    for (name, m) in &matrices {
        for i in 0..p {
            for j in 0..p {
                let _ = writeln!(body, "{name},{},{},{}", i + 1, j + 1, fmt_f64(m[(i, j)]));
            }
        }
        json.insert((*name).to_string(), mat_json(m));
    }
    Ok(Output {
        csv_body: body,
        results: vec![],
        json: Value::Object(json),
    })
}
