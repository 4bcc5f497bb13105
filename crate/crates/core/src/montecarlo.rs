//! Ensemble driver: streams paths in parallel, accumulates empirical moments
//! with compensated sums and reduces them in a fixed order.

use crate::flow::norm;
use crate::model::{make_builtin_model, ModelError, SdeModel};
use crate::noise::{NoiseError, NoiseGenerator};
use crate::schemes::{Grid, PathStepper, SchemeError, SchemeKind, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};
use thiserror::Error;

/// Paths per work unit. Fixed so that the reduction tree does not depend on
/// the worker count.
pub const CHUNK_PATHS: usize = 256;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

type Result<T> = std::result::Result<T, MonteCarloError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn build(&self) -> std::result::Result<SdeModel, ModelError> {
        make_builtin_model(&self.name, &self.params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub model: ModelSpec,
    pub scheme: SchemeKind,
    pub t_end: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub x0: Vec<f64>,
    pub master_seed: u64,
    pub exponents: Vec<f64>,
    /// `(t_lo, t_hi)` for window-max statistics.
    #[serde(default)]
    pub window: Option<(f64, f64)>,
    pub workers: usize,
}

impl EnsembleConfig {
    pub fn grid(&self) -> Result<Grid> {
        Ok(Grid::new(self.t_end, self.n_steps)?)
    }

    pub fn h(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Checks the config against `model`; returns the grid and the window
    /// index range.
    pub fn validate(&self, model: &SdeModel) -> Result<(Grid, Option<(usize, usize)>)> {
        let grid = self.grid()?;
        if self.n_paths == 0 {
            return Err(MonteCarloError::Config("n_paths must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(MonteCarloError::Config("workers must be at least 1".into()));
        }
        if self.x0.len() != model.dim {
            return Err(MonteCarloError::Config(format!(
                "x0 has {} entries, model `{}` has dimension {}",
                self.x0.len(),
                model.name,
                model.dim
            )));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(MonteCarloError::Config("x0 must be finite".into()));
        }
        if self.exponents.is_empty() || self.exponents.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(MonteCarloError::Config("exponents must be a nonempty list of positive reals".into()));
        }
        let window = match self.window {
            None => None,
            Some((lo, hi)) => {
                if !(lo >= 0.0 && lo <= hi && hi <= self.t_end * (1.0 + 1e-12)) {
                    return Err(MonteCarloError::Config(format!(
                        "window [{lo}, {hi}] must lie inside [0, {}]",
                        self.t_end
                    )));
                }
                let w = grid
                    .window_indices(lo, hi)
                    .ok_or_else(|| MonteCarloError::Config(format!("window [{lo}, {hi}] contains no grid point")))?;
                Some(w)
            }
        };
        Ok((grid, window))
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &Self) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        let v = self.sum + self.comp;
        // an infinite partial sum leaves NaN in the compensation
        if self.sum.is_infinite() {
            self.sum
        } else {
            v
        }
    }
}

/// `r^p` as `exp(p ln r)`, with `0^p = 0`.
#[inline]
pub fn abs_pow(r: f64, p: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        (p * r.ln()).exp()
    }
}

/// First and second raw moments of one statistic.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MomentAccumulator {
    sum: CompensatedSum,
    sum_sq: CompensatedSum,
    count: u64,
}

impl MomentAccumulator {
    #[inline]
    pub fn push(&mut self, v: f64) {
        self.sum.add(v);
        self.sum_sq.add(v * v);
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum.merge(&other.sum);
        self.sum_sq.merge(&other.sum_sq);
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum.value() / self.count as f64
        }
    }

    /// Population standard deviation over `sqrt(count)`.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        let n = self.count as f64;
        let mean = self.mean();
        let var = (self.sum_sq.value() / n - mean * mean).max(0.0);
        (var / n).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub exponent: f64,
    pub value: f64,
    pub std_error: f64,
    pub n_effective: u64,
}

impl MomentEstimate {
    fn from_acc(exponent: f64, acc: &MomentAccumulator) -> Self {
        Self {
            exponent,
            value: acc.mean(),
            std_error: acc.std_error(),
            n_effective: acc.count(),
        }
    }
}

/// Maximum over the window of the per-index ensemble moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMax {
    pub exponent: f64,
    pub value: f64,
    /// Standard error of the ensemble moment at the maximizing index.
    pub std_error: f64,
    pub index: usize,
    pub time: f64,
    pub n_effective: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub h: f64,
    pub scheme: SchemeKind,
    pub n_paths: u64,
    /// Paths censored before the terminal time, for any reason.
    pub nan_count: u64,
    /// The part of `nan_count` caused by numeric flow failures.
    pub flow_failure_count: u64,
    pub nan_fraction: f64,
    pub terminal: Vec<MomentEstimate>,
    pub window: Vec<WindowMax>,
}

impl MomentReport {
    pub fn terminal_for(&self, exponent: f64) -> Option<&MomentEstimate> {
        self.terminal.iter().find(|m| m.exponent == exponent)
    }

    pub fn window_for(&self, exponent: f64) -> Option<&WindowMax> {
        self.window.iter().find(|m| m.exponent == exponent)
    }
}

#[derive(Clone, Debug)]
struct ChunkStats {
    terminal: Vec<MomentAccumulator>,
    /// Row-major `window_len x exponents`.
    window: Vec<MomentAccumulator>,
    censored: u64,
    flow_failures: u64,
}

impl ChunkStats {
    fn new(n_exp: usize, window_len: usize) -> Self {
        Self {
            terminal: vec![MomentAccumulator::default(); n_exp],
            window: vec![MomentAccumulator::default(); n_exp * window_len],
            censored: 0,
            flow_failures: 0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.terminal.iter_mut().zip(&other.terminal) {
            a.merge(b);
        }
        for (a, b) in self.window.iter_mut().zip(&other.window) {
            a.merge(b);
        }
        self.censored += other.censored;
        self.flow_failures += other.flow_failures;
        self
    }
}

/// Pairwise reduction in index order; the tree shape depends only on
/// `items.len()`.
pub fn tree_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Evaluates `map` on consecutive ranges of `chunk` path indices using
/// `workers` threads and returns the results in range order.
pub fn map_chunks<T, F>(n_paths: usize, chunk: usize, workers: usize, map: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Send + Sync,
{
    let n_chunks = n_paths.div_ceil(chunk);
    let run = || {
        (0..n_chunks)
            .into_par_iter()
            .map(|c| map(c * chunk..((c + 1) * chunk).min(n_paths)))
            .collect::<Vec<T>>()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); running on the global pool");
            run()
        }
    }
}

enum PathEnd {
    Finite,
    NonFinite,
    FlowFailure,
}

/// Simulates one path, calling `visit(k, x)` on every finite grid state.
fn stream_path(
    model: &SdeModel,
    scheme: SchemeKind,
    generator: &NoiseGenerator,
    path: u64,
    x0: &[f64],
    n_steps: usize,
    mut visit: impl FnMut(usize, &[f64]),
) -> (PathEnd, Vec<f64>) {
    let mut stepper = PathStepper::new(model, scheme, generator.h());
    let mut db = vec![0.0; model.noise.brownian_dim];
    let mut dz = vec![0.0; model.noise.levy_dim];
    let mut x = x0.to_vec();
    visit(0, &x);
    for k in 0..n_steps {
        generator.fill_step(path, k as u64, &mut db, &mut dz);
        match stepper.advance(&mut x, &db, &dz) {
            Ok(true) => visit(k + 1, &x),
            Ok(false) => return (PathEnd::NonFinite, x),
            Err(_) => return (PathEnd::FlowFailure, x),
        }
    }
    (PathEnd::Finite, x)
}

/// Runs the ensemble described by `config` and returns its statistics.
/// The result is bit-identical for any worker count.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<MomentReport> {
    let model = config.model.build()?;
    let (grid, window) = config.validate(&model)?;
    let generator = NoiseGenerator::new(model.noise, config.master_seed, grid.h())?;
    let exps = &config.exponents;
    let n_exp = exps.len();
    let (w_lo, w_len) = window.map_or((0, 0), |(lo, hi)| (lo, hi - lo + 1));

    let chunks = map_chunks(config.n_paths, CHUNK_PATHS, config.workers, |range| {
        let mut stats = ChunkStats::new(n_exp, w_len);
        for path in range {
            let (end, x) = stream_path(&model, config.scheme, &generator, path as u64, &config.x0, grid.n, |k, x| {
                if k >= w_lo && k < w_lo + w_len {
                    let r = norm(x);
                    let row = &mut stats.window[(k - w_lo) * n_exp..(k - w_lo + 1) * n_exp];
                    for (acc, &p) in row.iter_mut().zip(exps) {
                        acc.push(abs_pow(r, p));
                    }
                }
            });
            match end {
                PathEnd::Finite => {
                    let r = norm(&x);
                    for (acc, &p) in stats.terminal.iter_mut().zip(exps) {
                        acc.push(abs_pow(r, p));
                    }
                }
                PathEnd::NonFinite => stats.censored += 1,
                PathEnd::FlowFailure => {
                    stats.censored += 1;
                    stats.flow_failures += 1;
                }
            }
        }
        stats
    });
    let total = tree_reduce(chunks, ChunkStats::merge).expect("at least one chunk");

    let terminal = exps
        .iter()
        .zip(&total.terminal)
        .map(|(&p, acc)| MomentEstimate::from_acc(p, acc))
        .collect();
    let window = (0..n_exp)
        .filter(|_| w_len > 0)
        .map(|j| window_max_of(&total.window, n_exp, j, exps[j], w_lo, &grid))
        .collect();
    let n = config.n_paths as u64;
    Ok(MomentReport {
        h: grid.h(),
        scheme: config.scheme,
        n_paths: n,
        nan_count: total.censored,
        flow_failure_count: total.flow_failures,
        nan_fraction: total.censored as f64 / n as f64,
        terminal,
        window,
    })
}

fn window_max_of(accs: &[MomentAccumulator], n_exp: usize, j: usize, exponent: f64, w_lo: usize, grid: &Grid) -> WindowMax {
    let mut best: Option<(usize, &MomentAccumulator)> = None;
    for (i, acc) in accs.iter().skip(j).step_by(n_exp).enumerate() {
        if acc.count() == 0 {
            continue;
        }
        // NaN-aware: a non-finite mean dominates
        let better = match best {
            None => true,
            Some((_, b)) => !(acc.mean() <= b.mean()),
        };
        if better {
            best = Some((i, acc));
        }
    }
    match best {
        Some((i, acc)) => WindowMax {
            exponent,
            value: acc.mean(),
            std_error: acc.std_error(),
            index: w_lo + i,
            time: grid.time(w_lo + i),
            n_effective: acc.count(),
        },
        None => WindowMax {
            exponent,
            value: f64::NAN,
            std_error: f64::NAN,
            index: w_lo,
            time: grid.time(w_lo),
            n_effective: 0,
        },
    }
}

/// Terminal states in path order; `None` for censored paths.
pub fn collect_terminal_states(config: &EnsembleConfig) -> Result<Vec<Option<Vec<f64>>>> {
    let model = config.model.build()?;
    let (grid, _) = config.validate(&model)?;
    let generator = NoiseGenerator::new(model.noise, config.master_seed, grid.h())?;
    let chunks = map_chunks(config.n_paths, CHUNK_PATHS, config.workers, |range| {
        range
            .map(|path| {
                match stream_path(&model, config.scheme, &generator, path as u64, &config.x0, grid.n, |_, _| {}) {
                    (PathEnd::Finite, x) => Some(x),
                    _ => None,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean of `‖x‖^p` over `samples` for each exponent, with standard errors.
pub fn empirical_moments(samples: &[Vec<f64>], exponents: &[f64]) -> Result<Vec<MomentEstimate>> {
    if samples.is_empty() {
        return Err(MonteCarloError::Argument("no samples".into()));
    }
    if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(MonteCarloError::Argument("samples must be finite".into()));
    }
    if exponents.iter().any(|&p| !(p > 0.0)) {
        return Err(MonteCarloError::Argument("exponents must be positive".into()));
    }
    let norms: Vec<f64> = samples.iter().map(|s| norm(s)).collect();
    Ok(exponents
        .iter()
        .map(|&p| {
            let mut acc = MomentAccumulator::default();
            for &r in &norms {
                acc.push(abs_pow(r, p));
            }
            MomentEstimate::from_acc(p, &acc)
        })
        .collect())
}

/// Window-max statistics over stored trajectories. States at and after a
/// path's censoring index are skipped.
pub fn window_max_moments(
    trajectories: &[Trajectory],
    grid: &Grid,
    window: (f64, f64),
    exponents: &[f64],
) -> Result<Vec<WindowMax>> {
    let (lo, hi) = window;
    if !(lo >= 0.0 && lo <= hi && hi <= grid.t_end * (1.0 + 1e-12)) {
        return Err(MonteCarloError::Argument(format!("window [{lo}, {hi}] is not inside [0, {}]", grid.t_end)));
    }
    let (k_lo, k_hi) = grid
        .window_indices(lo, hi)
        .ok_or_else(|| MonteCarloError::Argument(format!("window [{lo}, {hi}] contains no grid point")))?;
    let n_exp = exponents.len();
    let mut accs = vec![MomentAccumulator::default(); (k_hi - k_lo + 1) * n_exp];
    for traj in trajectories {
        if traj.len() != grid.n + 1 {
            return Err(MonteCarloError::Argument(format!(
                "trajectory has {} states, grid has {}",
                traj.len(),
                grid.n + 1
            )));
        }
        for k in k_lo..=k_hi {
            if let Some(x) = traj.valid_state(k) {
                let r = norm(x);
                for (j, &p) in exponents.iter().enumerate() {
                    accs[(k - k_lo) * n_exp + j].push(abs_pow(r, p));
                }
            }
        }
    }
    Ok((0..n_exp)
        .map(|j| window_max_of(&accs, n_exp, j, exponents[j], k_lo, grid))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Some sample overflowed: the exponential moment is numerically infinite.
    pub diverged: bool,
}

/// Ensemble mean of `exp(lambda / (1 + kappa) ‖x‖^{1 + kappa})`.
pub fn exp_moment_estimate(samples: &[Vec<f64>], lambda_exp: f64, kappa: f64) -> Result<ExpMomentEstimate> {
    if samples.is_empty() {
        return Err(MonteCarloError::Argument("no samples".into()));
    }
    if !(lambda_exp >= 0.0) || !kappa.is_finite() {
        return Err(MonteCarloError::Argument(format!(
            "need lambda >= 0 and finite kappa, got {lambda_exp}, {kappa}"
        )));
    }
    let scale = lambda_exp / (1.0 + kappa);
    let mut acc = MomentAccumulator::default();
    let mut diverged = false;
    for s in samples {
        let v = if lambda_exp == 0.0 {
            1.0
        } else {
            (scale * abs_pow(norm(s), 1.0 + kappa)).exp()
        };
        if !v.is_finite() {
            diverged = true;
        }
        acc.push(if v.is_nan() { f64::INFINITY } else { v });
    }
    if diverged {
        return Ok(ExpMomentEstimate {
            value: f64::INFINITY,
            std_error: f64::INFINITY,
            diverged,
        });
    }
    Ok(ExpMomentEstimate {
        value: acc.mean(),
        std_error: acc.std_error(),
        diverged,
    })
}

pub const CSV_HEADER: &str = "h,scheme,exponent,value,std_error,nan_count,N";

/// Terminal-moment rows; `N` is the number of paths entering the statistic.
pub fn write_terminal_csv<W: Write>(report: &MomentReport, out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for m in &report.terminal {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            report.h, report.scheme, m.exponent, m.value, m.std_error, report.nan_count, m.n_effective
        )?;
    }
    Ok(())
}

/// Window-max rows, same columns as [`write_terminal_csv`].
pub fn write_window_csv<W: Write>(report: &MomentReport, out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for m in &report.window {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            report.h, report.scheme, m.exponent, m.value, m.std_error, report.nan_count, m.n_effective
        )?;
    }
    Ok(())
}
