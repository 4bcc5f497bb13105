//! One-step maps and path integrators: explicit Euler, tamed Euler, the
//! splitting scheme `X_{k+1} = Phi(h, X_k + a h + b dB + c dZ)` and its two
//! reverse-order variants.

use crate::flow::{norm, FlowError};
use crate::model::SdeModel;
use crate::noise::NoiseGrid;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid grid: {0}")]
    Grid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    ExplicitEuler,
    TamedEuler,
    Splitting,
    ReverseSplitA,
    ReverseSplitB,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::ExplicitEuler,
        SchemeKind::TamedEuler,
        SchemeKind::Splitting,
        SchemeKind::ReverseSplitA,
        SchemeKind::ReverseSplitB,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::ExplicitEuler => "explicit_euler",
            SchemeKind::TamedEuler => "tamed_euler",
            SchemeKind::Splitting => "splitting",
            SchemeKind::ReverseSplitA => "reverse_split_a",
            SchemeKind::ReverseSplitB => "reverse_split_b",
        }
    }

    pub fn uses_flow(&self) -> bool {
        !matches!(self, SchemeKind::ExplicitEuler | SchemeKind::TamedEuler)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SchemeKind::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown scheme `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Uniform grid `t_k = k T / n`; times are always addressed by index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t_end: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(t_end: f64, n: usize) -> Result<Self, SchemeError> {
        if !(t_end > 0.0 && t_end.is_finite()) || n == 0 {
            return Err(SchemeError::Grid(format!("need T > 0 and n >= 1, got T = {t_end}, n = {n}")));
        }
        Ok(Self { t_end, n })
    }

    /// Grid with step `h` over `[0, T]`; `T / h` must be (numerically) an integer.
    pub fn from_step(t_end: f64, h: f64) -> Result<Self, SchemeError> {
        let n = (t_end / h).round();
        if !(h > 0.0) || n < 1.0 || ((n * h - t_end) / t_end).abs() > 1e-9 {
            return Err(SchemeError::Grid(format!("T = {t_end} is not a multiple of h = {h}")));
        }
        Self::new(t_end, n as usize)
    }

    pub fn h(&self) -> f64 {
        self.t_end / self.n as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h()
    }

    /// Indices `ceil(lo / h) ..= floor(hi / h)` clipped to the grid, or `None`
    /// when the window contains no grid point.
    pub fn window_indices(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let h = self.h();
        // tolerate representation error in lo/h and hi/h
        let snap = |v: f64| {
            let r = v.round();
            if (v - r).abs() < 1e-9 {
                r
            } else {
                v
            }
        };
        let first = snap(lo / h).ceil().max(0.0);
        let last = snap(hi / h).floor().min(self.n as f64);
        (first <= last).then_some((first as usize, last as usize))
    }
}

/// Scratch buffers for one path.
#[derive(Clone, Debug)]
pub struct Workspace {
    drift: Vec<f64>,
    bounded: Vec<f64>,
    pre: Vec<f64>,
    mat: Vec<f64>,
}

impl Workspace {
    pub fn new(model: &SdeModel) -> Self {
        let d = model.dim;
        let cols = model.noise.brownian_dim.max(model.noise.levy_dim);
        Self {
            drift: vec![0.0; d],
            bounded: vec![0.0; d],
            pre: vec![0.0; d],
            mat: vec![0.0; d * cols.max(1)],
        }
    }
}

/// `out += a(at) h + b(at) dB + c(at) dZ`.
#[inline]
fn add_euler_part(model: &SdeModel, at: &[f64], db: &[f64], dz: &[f64], h: f64, ws: &mut Workspace, out: &mut [f64]) {
    if !model.drift_bounded.is_zero() {
        model.drift_bounded.eval(at, &mut ws.bounded);
        for (o, a) in out.iter_mut().zip(&ws.bounded) {
            *o += a * h;
        }
    }
    if !db.is_empty() {
        model.diffusion.add_product(at, db, out, &mut ws.mat[..at.len() * db.len()]);
    }
    if !dz.is_empty() {
        model.jump.add_product(at, dz, out, &mut ws.mat[..at.len() * dz.len()]);
    }
}

/// One step of `kind` from `x` into `out`. Non-finite results are returned
/// as-is; only numeric flow failures are errors.
#[allow(clippy::too_many_arguments)]
pub fn step_into(
    kind: SchemeKind,
    model: &SdeModel,
    x: &[f64],
    db: &[f64],
    dz: &[f64],
    h: f64,
    ws: &mut Workspace,
    out: &mut [f64],
) -> Result<(), FlowError> {
    match kind {
        SchemeKind::ExplicitEuler => {
            model.eval_superlinear(x, &mut ws.drift);
            model.drift_bounded.eval(x, &mut ws.bounded);
            for i in 0..x.len() {
                out[i] = x[i] + (ws.drift[i] + ws.bounded[i]) * h;
            }
            add_noise(model, x, db, dz, ws, out);
            Ok(())
        }
        SchemeKind::TamedEuler => {
            model.eval_superlinear(x, &mut ws.drift);
            model.drift_bounded.eval(x, &mut ws.bounded);
            for i in 0..x.len() {
                ws.drift[i] += ws.bounded[i];
            }
            let denom = 1.0 + norm(&ws.drift) * h;
            for i in 0..x.len() {
                out[i] = x[i] + ws.drift[i] * h / denom;
            }
            add_noise(model, x, db, dz, ws, out);
            Ok(())
        }
        SchemeKind::Splitting => {
            ws.pre.copy_from_slice(x);
            let mut pre = std::mem::take(&mut ws.pre);
            add_euler_part(model, x, db, dz, h, ws, &mut pre);
            let res = model.flow.evaluate_into(h, &pre, out);
            ws.pre = pre;
            res
        }
        SchemeKind::ReverseSplitA => {
            model.flow.evaluate_into(h, x, out)?;
            add_euler_part(model, x, db, dz, h, ws, out);
            Ok(())
        }
        SchemeKind::ReverseSplitB => {
            model.flow.evaluate_into(h, x, &mut ws.pre)?;
            out.copy_from_slice(&ws.pre);
            let pre = std::mem::take(&mut ws.pre);
            add_euler_part(model, &pre, db, dz, h, ws, out);
            ws.pre = pre;
            Ok(())
        }
    }
}

#[inline]
fn add_noise(model: &SdeModel, x: &[f64], db: &[f64], dz: &[f64], ws: &mut Workspace, out: &mut [f64]) {
    if !db.is_empty() {
        model.diffusion.add_product(x, db, out, &mut ws.mat[..x.len() * db.len()]);
    }
    if !dz.is_empty() {
        model.jump.add_product(x, dz, out, &mut ws.mat[..x.len() * dz.len()]);
    }
}

fn step_alloc(kind: SchemeKind, x: &[f64], db: &[f64], dz: &[f64], h: f64, model: &SdeModel) -> Result<Vec<f64>, FlowError> {
    let mut ws = Workspace::new(model);
    let mut out = vec![0.0; x.len()];
    step_into(kind, model, x, db, dz, h, &mut ws, &mut out)?;
    Ok(out)
}

/// `x + (A(x) + a(x)) h + b(x) dB + c(x) dZ`.
pub fn step_explicit_euler(x: &[f64], db: &[f64], dz: &[f64], h: f64, model: &SdeModel) -> Vec<f64> {
    step_alloc(SchemeKind::ExplicitEuler, x, db, dz, h, model).expect("euler never touches the flow")
}

/// Euler step with the drift increment tamed to `Ã h / (1 + |Ã| h)`, `Ã = A + a`.
pub fn step_tamed_euler(x: &[f64], db: &[f64], dz: &[f64], h: f64, model: &SdeModel) -> Vec<f64> {
    step_alloc(SchemeKind::TamedEuler, x, db, dz, h, model).expect("tamed euler never touches the flow")
}

/// `Phi(h, x + a(x) h + b(x) dB + c(x) dZ)`.
pub fn step_splitting(x: &[f64], db: &[f64], dz: &[f64], h: f64, model: &SdeModel) -> Result<Vec<f64>, FlowError> {
    step_alloc(SchemeKind::Splitting, x, db, dz, h, model)
}

/// `Phi(h, x) + a(x) h + b(x) dB + c(x) dZ`.
pub fn step_reverse_a(x: &[f64], db: &[f64], dz: &[f64], h: f64, model: &SdeModel) -> Result<Vec<f64>, FlowError> {
    step_alloc(SchemeKind::ReverseSplitA, x, db, dz, h, model)
}

/// `y + a(y) h + b(y) dB + c(y) dZ` with `y = Phi(h, x)`.
pub fn step_reverse_b(x: &[f64], db: &[f64], dz: &[f64], h: f64, model: &SdeModel) -> Result<Vec<f64>, FlowError> {
    step_alloc(SchemeKind::ReverseSplitB, x, db, dz, h, model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathStatus {
    Ok,
    /// First grid index holding a NaN or infinite coordinate.
    NonFinite(usize),
    /// First grid index the numeric flow failed to reach.
    FlowFailure(usize),
}

impl PathStatus {
    /// First index whose state must be excluded from statistics.
    pub fn censored_from(&self) -> Option<usize> {
        match *self {
            PathStatus::Ok => None,
            PathStatus::NonFinite(k) | PathStatus::FlowFailure(k) => Some(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    /// `(n + 1) * dim` values; rows at and after a censored index are NaN.
    pub states: Vec<f64>,
    pub status: PathStatus,
    pub scheme: SchemeKind,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// State at `k` if it is usable for statistics.
    pub fn valid_state(&self, k: usize) -> Option<&[f64]> {
        match self.status.censored_from() {
            Some(bad) if k >= bad => None,
            _ => Some(self.state(k)),
        }
    }
}

/// Iterates the scheme over a stream of increments, tracking the status.
pub struct PathStepper<'m> {
    model: &'m SdeModel,
    kind: SchemeKind,
    h: f64,
    ws: Workspace,
    next: Vec<f64>,
}

impl<'m> PathStepper<'m> {
    pub fn new(model: &'m SdeModel, kind: SchemeKind, h: f64) -> Self {
        Self {
            model,
            kind,
            h,
            ws: Workspace::new(model),
            next: vec![0.0; model.dim],
        }
    }

    /// Advances `x` in place. Returns `Ok(false)` if the new state is not finite.
    #[inline]
    pub fn advance(&mut self, x: &mut [f64], db: &[f64], dz: &[f64]) -> Result<bool, FlowError> {
        step_into(self.kind, self.model, x, db, dz, self.h, &mut self.ws, &mut self.next)?;
        x.copy_from_slice(&self.next);
        Ok(x.iter().all(|v| v.is_finite()))
    }
}

/// Runs `scheme` over `noise` from `x0`, recording every grid state.
pub fn simulate_path(
    model: &SdeModel,
    scheme: SchemeKind,
    grid: &Grid,
    noise: &NoiseGrid,
    x0: &[f64],
) -> Result<Trajectory, SchemeError> {
    let d = model.dim;
    if x0.len() != d {
        return Err(SchemeError::Dimension(format!("x0 has {} entries, model dimension is {d}", x0.len())));
    }
    if noise.n_steps() != grid.n {
        return Err(SchemeError::Dimension(format!(
            "noise has {} steps, grid has {}",
            noise.n_steps(),
            grid.n
        )));
    }
    if noise.brownian_dim() != model.noise.brownian_dim || noise.levy_dim() != model.noise.levy_dim {
        return Err(SchemeError::Dimension(format!(
            "noise dimensions ({}, {}) do not match the model ({}, {})",
            noise.brownian_dim(),
            noise.levy_dim(),
            model.noise.brownian_dim,
            model.noise.levy_dim
        )));
    }
    let mut states = vec![f64::NAN; (grid.n + 1) * d];
    states[..d].copy_from_slice(x0);
    let mut status = if x0.iter().all(|v| v.is_finite()) {
        PathStatus::Ok
    } else {
        PathStatus::NonFinite(0)
    };
    let mut stepper = PathStepper::new(model, scheme, grid.h());
    let mut x = x0.to_vec();
    if status == PathStatus::Ok {
        for k in 0..grid.n {
            match stepper.advance(&mut x, noise.db(k), noise.dz(k)) {
                Ok(true) => states[(k + 1) * d..(k + 2) * d].copy_from_slice(&x),
                Ok(false) => {
                    states[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
                    status = PathStatus::NonFinite(k + 1);
                    break;
                }
                Err(_) => {
                    status = PathStatus::FlowFailure(k + 1);
                    break;
                }
            }
        }
    }
    Ok(Trajectory {
        dim: d,
        states,
        status,
        scheme,
    })
}
