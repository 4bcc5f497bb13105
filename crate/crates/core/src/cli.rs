//! Command-line front end: experiment configs, table sweeps, convergence
//! studies and the rate calculator.

use crate::analysis::{
    self, predict_rates, stationary_moment, strong_error_study, AnalysisError, ErrorCurve, ErrorMode, RateInputs,
    StrongErrorConfig,
};
use crate::model::{check_hypotheses, make_builtin_model, ModelError};
use crate::montecarlo::{
    run_ensemble, write_terminal_csv, write_window_csv, EnsembleConfig, ModelSpec, MomentReport, MonteCarloError,
};
use crate::noise::{Channel, StreamKey};
use crate::schemes::SchemeKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Default cap on `paths x steps` before a run is refused.
pub const DEFAULT_BUDGET: f64 = 2e11;

pub const TABLE_EXPONENTS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];
pub const TABLE_H: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];
const TABLE_FULL_PATHS: f64 = 1e7;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Budget(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    MonteCarlo(#[from] MonteCarloError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Budget(_) => 3,
            CliError::Io { .. } => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "levysplit", version, about = "Splitting schemes for Levy-driven SDEs with superlinear drift")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "LEVYSPLIT_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one ensemble and write its moment report.
    Simulate(SimulateArgs),
    /// Reproduce one of the six experiment tables.
    Table(TableArgs),
    /// Coupled strong-error study with a fitted log-log slope.
    Converge(ConvergeArgs),
    /// Evaluate the theoretical rate formulas.
    Rates(RatesArgs),
    /// Spot-check the drift and coefficient hypotheses of a model.
    CheckModel(CheckModelArgs),
}

fn parse_param(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected lo,hi, got `{s}`"))?;
    let lo = a.trim().parse().map_err(|_| format!("bad window start `{a}`"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad window end `{b}`"))?;
    Ok((lo, hi))
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Built-in model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Model parameter, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// TOML config, or a JSON sidecar from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub scheme: Option<SchemeKind>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Step size; `T / h` must be an integer.
    #[arg(long, conflicts_with = "n_steps")]
    pub h: Option<f64>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub exponents: Option<Vec<f64>>,
    /// Window `lo,hi` for window-max statistics.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<(f64, f64)>,
    #[arg(long)]
    pub budget: Option<f64>,
    /// Output prefix: writes PREFIX.csv, PREFIX.json and PREFIX_window.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    /// Table number, 1 to 6.
    #[arg(value_parser = clap::value_parser!(u8).range(1..=6))]
    pub id: u8,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of the full 10^7 paths.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub h_list: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget: Option<f64>,
    /// CSV path; the sidecar goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConvergeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub scheme: Option<SchemeKind>,
    /// Scheme for the fine reference path.
    #[arg(long)]
    pub reference: Option<SchemeKind>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    #[arg(long)]
    pub n_ref: Option<usize>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<ErrorMode>,
    /// Noise moment order used for the predicted rate.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub budget: Option<f64>,
    /// Output prefix: writes PREFIX.csv, PREFIX_slope.csv and PREFIX.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RatesArgs {
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub kappa: f64,
    #[arg(long)]
    pub chi: f64,
    #[arg(long)]
    pub p_x: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_diss: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b_sup: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CheckModelArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e3)]
    pub radius: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub scheme: Option<SchemeKind>,
    pub t_end: Option<f64>,
    pub h: Option<f64>,
    pub n_steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub x0: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub exponents: Option<Vec<f64>>,
    pub window: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub scheme: Option<SchemeKind>,
    pub reference: Option<SchemeKind>,
    pub q: Option<f64>,
    pub n_list: Option<Vec<usize>>,
    pub n_ref: Option<usize>,
    pub n_paths: Option<usize>,
    pub t_end: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub mode: Option<ErrorMode>,
    pub p: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSection {
    pub scale: Option<f64>,
    pub h_list: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub workers: Option<usize>,
    pub budget: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub prefix: Option<PathBuf>,
}

/// Declarative experiment description. Every field is optional in the file;
/// command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub converge: ConvergeSection,
    #[serde(default)]
    pub table: TableSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Reads a TOML config, or the `resolved_config` of a JSON sidecar.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let inner = value.get("resolved_config").cloned().unwrap_or(value);
        return serde_json::from_value(inner).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())));
    }
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_optional(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    path.as_deref().map_or_else(|| Ok(ExperimentConfig::default()), load_config)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn resolve_model(args: &ModelArgs, section: &ModelSection, default: &str) -> ModelSection {
    let mut params = section.params.clone();
    params.extend(args.params.iter().cloned());
    ModelSection {
        name: Some(args.model.clone().or_else(|| section.name.clone()).unwrap_or_else(|| default.into())),
        params,
    }
}

fn resolve_run(cli_workers: Option<usize>, cli_budget: Option<f64>, run: &RunSection) -> RunSection {
    RunSection {
        workers: Some(cli_workers.or(run.workers).unwrap_or_else(default_workers)),
        budget: Some(cli_budget.or(run.budget).unwrap_or(DEFAULT_BUDGET)),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let io_err = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    fs::write(path, contents).map_err(io_err)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    version: &'a str,
    command: &'a str,
    wall_time_seconds: f64,
    resolved_config: &'a ExperimentConfig,
    result: T,
}

fn write_sidecar<T: Serialize>(
    path: &Path,
    command: &str,
    config: &ExperimentConfig,
    started: Instant,
    result: T,
) -> Result<()> {
    let sidecar = Sidecar {
        version: VERSION,
        command,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        resolved_config: config,
        result,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("serializable sidecar");
    write_file(path, &(text + "\n"))
}

fn check_budget(work: f64, budget: f64, what: &str) -> Result<()> {
    if work > budget {
        return Err(CliError::Budget(format!(
            "{what} needs about {work:.3e} path-steps, above the budget of {budget:.3e}"
        )));
    }
    Ok(())
}

fn n_steps_for(t_end: f64, h: f64) -> Result<usize> {
    let n = (t_end / h).round();
    if !(h > 0.0) || n < 1.0 || ((n * h - t_end) / t_end).abs() > 1e-9 {
        return usage(format!("T = {t_end} is not a positive multiple of h = {h}"));
    }
    Ok(n as usize)
}

/// Resolves `simulate` flags against the config into a complete config.
pub fn resolve_simulate(args: &SimulateArgs, cli_workers: Option<usize>) -> Result<ExperimentConfig> {
    let file = load_optional(&args.config)?;
    let model = resolve_model(&args.model, &file.model, "cauchy_cubic");
    let built = make_builtin_model(model.name.as_deref().unwrap_or_default(), &model.params)?;
    let e = &file.ensemble;
    let t_end = args.t_end.or(e.t_end).unwrap_or(5.0);
    let n_steps = match (args.n_steps, args.h) {
        (Some(n), _) => n,
        (None, Some(h)) => n_steps_for(t_end, h)?,
        (None, None) => match (e.n_steps, e.h) {
            (Some(n), _) => n,
            (None, Some(h)) => n_steps_for(t_end, h)?,
            (None, None) => n_steps_for(t_end, 1e-3)?,
        },
    };
    let ensemble = EnsembleSection {
        scheme: Some(args.scheme.or(e.scheme).unwrap_or(SchemeKind::Splitting)),
        t_end: Some(t_end),
        h: Some(t_end / n_steps as f64),
        n_steps: Some(n_steps),
        n_paths: Some(args.n_paths.or(e.n_paths).unwrap_or(10_000)),
        x0: Some(args.x0.clone().or_else(|| e.x0.clone()).unwrap_or_else(|| vec![0.0; built.dim])),
        seed: Some(args.seed.or(e.seed).unwrap_or(1)),
        exponents: Some(args.exponents.clone().or_else(|| e.exponents.clone()).unwrap_or(TABLE_EXPONENTS.to_vec())),
        window: args.window.or(e.window),
    };
    Ok(ExperimentConfig {
        model,
        ensemble,
        run: resolve_run(cli_workers, args.budget, &file.run),
        output: OutputSection {
            prefix: Some(args.out.clone().or_else(|| file.output.prefix.clone()).unwrap_or_else(|| "levysplit_out".into())),
        },
        ..Default::default()
    })
}

fn ensemble_config(cfg: &ExperimentConfig) -> EnsembleConfig {
    let e = &cfg.ensemble;
    EnsembleConfig {
        model: ModelSpec {
            name: cfg.model.name.clone().unwrap_or_default(),
            params: cfg.model.params.clone(),
        },
        scheme: e.scheme.unwrap_or(SchemeKind::Splitting),
        t_end: e.t_end.unwrap_or(5.0),
        n_steps: e.n_steps.unwrap_or(1),
        n_paths: e.n_paths.unwrap_or(1),
        x0: e.x0.clone().unwrap_or_default(),
        master_seed: e.seed.unwrap_or(1),
        exponents: e.exponents.clone().unwrap_or_default(),
        window: e.window,
        workers: cfg.run.workers.unwrap_or(1),
    }
}

pub fn cmd_simulate(args: &SimulateArgs, cli_workers: Option<usize>) -> Result<MomentReport> {
    let started = Instant::now();
    let cfg = resolve_simulate(args, cli_workers)?;
    let ens = ensemble_config(&cfg);
    check_budget(
        ens.n_paths as f64 * ens.n_steps as f64,
        cfg.run.budget.unwrap_or(DEFAULT_BUDGET),
        "simulate",
    )?;
    log::info!("simulating {} paths x {} steps of {}", ens.n_paths, ens.n_steps, ens.model.name);
    let report = run_ensemble(&ens)?;
    let prefix = cfg.output.prefix.clone().unwrap_or_default();
    let mut csv = Vec::new();
    write_terminal_csv(&report, &mut csv).expect("write to memory");
    write_file(&with_suffix(&prefix, ".csv"), &String::from_utf8(csv).expect("utf8"))?;
    if ens.window.is_some() {
        let mut csv = Vec::new();
        write_window_csv(&report, &mut csv).expect("write to memory");
        write_file(&with_suffix(&prefix, "_window.csv"), &String::from_utf8(csv).expect("utf8"))?;
    }
    write_sidecar(&with_suffix(&prefix, ".json"), "simulate", &cfg, started, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct TableRow {
    pub h: f64,
    /// Censored paths of the scheme whose moments are shown; for table 1 the
    /// explicit Euler census.
    pub nan_count: u64,
    pub reports: Vec<MomentReport>,
}

fn table_scheme(id: u8) -> SchemeKind {
    match id {
        2 | 6 => SchemeKind::Splitting,
        4 | 5 => SchemeKind::ReverseSplitA,
        _ => SchemeKind::TamedEuler,
    }
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn moment_columns(prefix: &str) -> String {
    TABLE_EXPONENTS
        .iter()
        .map(|p| format!("{prefix}_{p},se_{p}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Truncated stationary moments for each `h`, plus the untruncated row.
pub fn table3_csv(h_list: &[f64]) -> Result<String> {
    let mut out = format!("h,K,{}\n", TABLE_EXPONENTS.map(|p| format!("m_{p}")).join(","));
    for &h in h_list {
        let k = 1.0 / (2.0 * h).sqrt();
        let row: Vec<f64> = TABLE_EXPONENTS
            .iter()
            .map(|&p| stationary_moment(p, Some(k)))
            .collect::<std::result::Result<_, _>>()?;
        writeln!(out, "{h},{k},{}", fmt_row(&row)).expect("write to string");
    }
    let row: Vec<f64> = TABLE_EXPONENTS
        .iter()
        .map(|&p| stationary_moment(p, None))
        .collect::<std::result::Result<_, _>>()?;
    writeln!(out, "0,inf,{}", fmt_row(&row)).expect("write to string");
    Ok(out)
}

pub fn cmd_table(args: &TableArgs, cli_workers: Option<usize>) -> Result<String> {
    let started = Instant::now();
    let file = load_optional(&args.config)?;
    let scale = args.scale.or(file.table.scale).unwrap_or(0.01);
    if !(scale > 0.0 && scale <= 1.0) {
        return usage(format!("scale must lie in (0, 1], got {scale}"));
    }
    let h_list = args.h_list.clone().or_else(|| file.table.h_list.clone()).unwrap_or(TABLE_H.to_vec());
    let seed = args.seed.or(file.table.seed).unwrap_or(1);
    let run = resolve_run(cli_workers, args.budget, &file.run);
    let n_paths = ((TABLE_FULL_PATHS * scale).round() as usize).max(1);
    let id = args.id;
    let out_path = args
        .out
        .clone()
        .or_else(|| file.output.prefix.as_ref().map(|p| with_suffix(p, ".csv")))
        .unwrap_or_else(|| PathBuf::from(format!("table{id}.csv")));
    let resolved = ExperimentConfig {
        model: ModelSection {
            name: Some("cauchy_cubic".into()),
            params: BTreeMap::new(),
        },
        table: TableSection {
            scale: Some(scale),
            h_list: Some(h_list.clone()),
            seed: Some(seed),
        },
        run: run.clone(),
        output: OutputSection {
            prefix: Some(out_path.with_extension("")),
        },
        ..Default::default()
    };

    if id == 3 {
        let csv = table3_csv(&h_list)?;
        write_file(&out_path, &csv)?;
        write_sidecar(&out_path.with_extension("json"), "table 3", &resolved, started, &csv)?;
        return Ok(csv);
    }

    let windowed = id == 5 || id == 6;
    let t_end = if windowed { 6.0 } else { 5.0 };
    let budget = run.budget.unwrap_or(DEFAULT_BUDGET);
    let ensembles_per_row = if id == 1 { 2.0 } else { 1.0 };
    let mut csv = if id == 1 {
        format!("h,N,euler_nan_count,tamed_nan_count,{}\n", moment_columns("m"))
    } else if windowed {
        format!("h,N,nan_count,{}\n", moment_columns("max"))
    } else {
        format!("h,N,nan_count,{}\n", moment_columns("m"))
    };
    let mut rows = Vec::new();
    for &h in &h_list {
        let n_steps = n_steps_for(t_end, h)?;
        let work = ensembles_per_row * n_paths as f64 * n_steps as f64;
        if work > budget {
            log::warn!("table {id}: skipping h = {h}, {work:.3e} path-steps exceed the budget {budget:.3e}");
            eprintln!("warning: table {id}: row h = {h} skipped ({work:.3e} path-steps > budget {budget:.3e})");
            continue;
        }
        let base = EnsembleConfig {
            model: ModelSpec::new("cauchy_cubic"),
            scheme: table_scheme(id),
            t_end,
            n_steps,
            n_paths,
            x0: vec![0.0],
            master_seed: seed,
            exponents: TABLE_EXPONENTS.to_vec(),
            window: windowed.then_some((5.0, 6.0)),
            workers: run.workers.unwrap_or(1),
        };
        log::info!("table {id}: h = {h}, {n_paths} paths");
        let report = run_ensemble(&base)?;
        let mut reports = vec![];
        let nan_count = if id == 1 {
            let euler = run_ensemble(&EnsembleConfig {
                scheme: SchemeKind::ExplicitEuler,
                ..base.clone()
            })?;
            let c = euler.nan_count;
            reports.push(euler);
            c
        } else {
            report.nan_count
        };
        let mut cols = Vec::new();
        if windowed {
            for m in &report.window {
                cols.extend([m.value, m.std_error]);
            }
        } else {
            for m in &report.terminal {
                cols.extend([m.value, m.std_error]);
            }
        }
        if id == 1 {
            writeln!(csv, "{h},{n_paths},{nan_count},{},{}", report.nan_count, fmt_row(&cols)).expect("write to string");
        } else {
            writeln!(csv, "{h},{n_paths},{nan_count},{}", fmt_row(&cols)).expect("write to string");
        }
        reports.push(report);
        rows.push(TableRow { h, nan_count, reports });
    }
    write_file(&out_path, &csv)?;
    write_sidecar(&out_path.with_extension("json"), &format!("table {id}"), &resolved, started, &rows)?;
    Ok(csv)
}

/// Predicted exponent of `h` for the measured error curve, with its label.
pub fn predicted_slope(noise_has_jumps: bool, p: f64, chi: f64, q: f64, mode: ErrorMode) -> (f64, &'static str) {
    if !noise_has_jumps {
        return (q / 2.0, "gaussian_rate");
    }
    match mode {
        ErrorMode::SupOfMean => (analysis::rate_bar_delta(p, q, chi).unwrap_or(f64::NAN), "bar_delta"),
        ErrorMode::MeanOfSup => (analysis::rate_delta_sup(p, q, chi).unwrap_or(f64::NAN), "delta_sup"),
    }
}

pub fn resolve_converge(args: &ConvergeArgs, cli_workers: Option<usize>) -> Result<ExperimentConfig> {
    let file = load_optional(&args.config)?;
    let model = resolve_model(&args.model, &file.model, "gaussian_cubic");
    let built = make_builtin_model(model.name.as_deref().unwrap_or_default(), &model.params)?;
    let c = &file.converge;
    let converge = ConvergeSection {
        scheme: Some(args.scheme.or(c.scheme).unwrap_or(SchemeKind::Splitting)),
        reference: Some(args.reference.or(c.reference).unwrap_or(SchemeKind::Splitting)),
        q: Some(args.q.or(c.q).unwrap_or(1.0)),
        n_list: Some(args.n_list.clone().or_else(|| c.n_list.clone()).unwrap_or_else(|| (6..=12).map(|k| 1 << k).collect())),
        n_ref: Some(args.n_ref.or(c.n_ref).unwrap_or(1 << 15)),
        n_paths: Some(args.n_paths.or(c.n_paths).unwrap_or(1000)),
        t_end: Some(args.t_end.or(c.t_end).unwrap_or(1.0)),
        x0: Some(args.x0.clone().or_else(|| c.x0.clone()).unwrap_or_else(|| vec![0.0; built.dim])),
        seed: Some(args.seed.or(c.seed).unwrap_or(1)),
        mode: Some(args.mode.or(c.mode).unwrap_or(ErrorMode::MeanOfSup)),
        p: Some(args.p.or(c.p).unwrap_or(built.noise.p_moment)),
    };
    Ok(ExperimentConfig {
        model,
        converge,
        run: resolve_run(cli_workers, args.budget, &file.run),
        output: OutputSection {
            prefix: Some(args.out.clone().or_else(|| file.output.prefix.clone()).unwrap_or_else(|| "converge".into())),
        },
        ..Default::default()
    })
}

pub fn cmd_converge(args: &ConvergeArgs, cli_workers: Option<usize>) -> Result<ErrorCurve> {
    let started = Instant::now();
    let cfg = resolve_converge(args, cli_workers)?;
    let c = &cfg.converge;
    let model = make_builtin_model(cfg.model.name.as_deref().unwrap_or_default(), &cfg.model.params)?;
    let study = StrongErrorConfig {
        scheme: c.scheme.unwrap_or(SchemeKind::Splitting),
        reference: c.reference.unwrap_or(SchemeKind::Splitting),
        q: c.q.unwrap_or(1.0),
        n_list: c.n_list.clone().unwrap_or_default(),
        n_ref: c.n_ref.unwrap_or(1),
        n_paths: c.n_paths.unwrap_or(1),
        t_end: c.t_end.unwrap_or(1.0),
        x0: c.x0.clone().unwrap_or_default(),
        master_seed: c.seed.unwrap_or(1),
        mode: c.mode.unwrap_or(ErrorMode::MeanOfSup),
        workers: cfg.run.workers.unwrap_or(1),
    };
    let work = study.n_paths as f64 * (study.n_ref + study.n_list.iter().sum::<usize>()) as f64;
    check_budget(work, cfg.run.budget.unwrap_or(DEFAULT_BUDGET), "converge")?;
    let curve = strong_error_study(&model, &study)?;

    let prefix = cfg.output.prefix.clone().unwrap_or_default();
    let mut csv = String::from("n,h,error,std_error\n");
    for p in &curve.points {
        writeln!(csv, "{},{},{},{}", p.n, p.h, p.error, p.std_error).expect("write to string");
    }
    write_file(&with_suffix(&prefix, ".csv"), &csv)?;
    let (predicted, label) = predicted_slope(
        model.has_jumps(),
        c.p.unwrap_or(model.noise.p_moment),
        model.constants.chi,
        study.q,
        study.mode,
    );
    let slope = format!(
        "mode,q,fitted_slope,fit_intercept,predicted_slope,prediction\n{},{},{},{},{},{}\n",
        study.mode, study.q, curve.fitted_slope, curve.fit_intercept, predicted, label
    );
    write_file(&with_suffix(&prefix, "_slope.csv"), &slope)?;
    write_sidecar(&with_suffix(&prefix, ".json"), "converge", &cfg, started, &curve)?;
    Ok(curve)
}

pub fn cmd_rates(args: &RatesArgs) -> Result<String> {
    let pred = predict_rates(&RateInputs {
        p: args.p,
        q: args.q,
        kappa: args.kappa,
        chi: args.chi,
        p_x: args.p_x,
        c_diss: args.c_diss,
        b_sup: args.b_sup,
    })?;
    Ok(if args.json {
        serde_json::to_string_pretty(&pred).expect("serializable") + "\n"
    } else {
        format!(
            "bar_delta = {}\ndelta_sup = {}\ngamma_sup = {}\nlambda_threshold = {}\ngaussian_rate = {}\n",
            pred.bar_delta, pred.delta_sup, pred.gamma_sup, pred.lambda_threshold, pred.gaussian_rate
        )
    })
}

pub fn cmd_check_model(args: &CheckModelArgs) -> Result<String> {
    let section = resolve_model(&args.model, &ModelSection::default(), "cauchy_cubic");
    let model = make_builtin_model(section.name.as_deref().unwrap_or_default(), &section.params)?;
    let report = check_hypotheses(
        &model,
        args.samples,
        args.radius,
        StreamKey::new(args.seed, 0, 0, Channel::Brownian),
    );
    if !report.all_passed() {
        log::warn!("model `{}` violates a declared hypothesis", model.name);
    }
    Ok(serde_json::to_string_pretty(&report).expect("serializable") + "\n")
}

/// Runs a parsed command line; printing goes to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    if cli.workers == Some(0) {
        return usage("--workers must be at least 1");
    }
    match &cli.command {
        Command::Simulate(a) => {
            let report = cmd_simulate(a, cli.workers)?;
            println!(
                "h = {}, scheme = {}, nan_count = {} of {}",
                report.h, report.scheme, report.nan_count, report.n_paths
            );
        }
        Command::Table(a) => print!("{}", cmd_table(a, cli.workers)?),
        Command::Converge(a) => {
            let curve = cmd_converge(a, cli.workers)?;
            println!("fitted slope = {} ({})", curve.fitted_slope, curve.mode);
        }
        Command::Rates(a) => print!("{}", cmd_rates(a)?),
        Command::CheckModel(a) => print!("{}", cmd_check_model(a)?),
    }
    Ok(())
}
