//! Rate formulas, the stationary law of the cubic Cauchy example and the
//! coupled fine/coarse strong-error estimator.

use crate::flow::norm;
use crate::model::SdeModel;
use crate::montecarlo::{abs_pow, map_chunks, tree_reduce, MomentAccumulator, CHUNK_PATHS};
use crate::noise::{aggregate_to_coarse, NoiseError, NoiseGenerator, NoiseGrid};
use crate::schemes::{simulate_path, Grid, PathStepper, SchemeError, SchemeKind};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("moment of order {0} of the stationary law is infinite")]
    Divergent(f64),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

type Result<T> = std::result::Result<T, AnalysisError>;

fn argument<T>(msg: impl Into<String>) -> Result<T> {
    Err(AnalysisError::Argument(msg.into()))
}

fn check_pq(p: f64, q: f64, chi: f64) -> Result<()> {
    if !(q > 0.0 && q < p) {
        return argument(format!("need 0 < q < p, got p = {p}, q = {q}"));
    }
    if !(chi >= 0.0) {
        return argument(format!("chi must be nonnegative, got {chi}"));
    }
    Ok(())
}

fn tail_ratio(p: f64, q: f64, chi: f64) -> f64 {
    if chi == 0.0 {
        f64::INFINITY
    } else {
        (p - q) / chi
    }
}

/// Strong rate on the grid: `min((p - q)/chi, q/2, 1)`.
pub fn rate_bar_delta(p: f64, q: f64, chi: f64) -> Result<f64> {
    check_pq(p, q, chi)?;
    Ok(tail_ratio(p, q, chi).min(q / 2.0).min(1.0))
}

/// Uniform-in-time rate: `min((p - q)/chi, q/4, 1/2)`.
pub fn rate_delta_sup(p: f64, q: f64, chi: f64) -> Result<f64> {
    check_pq(p, q, chi)?;
    Ok(tail_ratio(p, q, chi).min(q / 4.0).min(0.5))
}

/// Open supremum of the admissible rates for the `p_x`-th moment error.
pub fn rate_gamma_sup(p: f64, kappa: f64, chi: f64, p_x: f64) -> Result<f64> {
    if !(kappa > 1.0) || !(chi >= 0.0) || !(p > 0.0) {
        return argument(format!("need p > 0, kappa > 1, chi >= 0, got {p}, {kappa}, {chi}"));
    }
    if !(p_x >= p && p_x < p + kappa - 1.0) {
        return argument(format!("p_X must lie in [p, p + kappa - 1) = [{p}, {}), got {p_x}", p + kappa - 1.0));
    }
    let gap = p + kappa - 1.0 - p_x;
    Ok(if p <= chi + 2.0 {
        p * gap / ((chi + 2.0) * (kappa - 1.0) + chi * p)
    } else {
        gap / (kappa + chi - 1.0)
    })
}

/// `2 C_diss / b_sup^2`, infinite without diffusion.
pub fn lambda_threshold(c_diss: f64, b_sup: f64) -> Result<f64> {
    if !(c_diss > 0.0) || !(b_sup >= 0.0) {
        return argument(format!("need C_diss > 0 and b_sup >= 0, got {c_diss}, {b_sup}"));
    }
    Ok(if b_sup == 0.0 {
        f64::INFINITY
    } else {
        2.0 * c_diss / (b_sup * b_sup)
    })
}

/// Exponent of `h` in the bias of the `p_x`-th moment from the bounded iterates.
pub fn systematic_error_order(p_x: f64, kappa: f64, p: f64) -> Result<f64> {
    if !(kappa > 1.0) {
        return argument(format!("kappa must exceed 1, got {kappa}"));
    }
    if !(p_x > 0.0 && p_x <= p + kappa - 1.0) {
        return argument(format!("p_X must lie in (0, p + kappa - 1], got {p_x}"));
    }
    Ok((p + kappa - 1.0 - p_x) / (kappa - 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePrediction {
    pub bar_delta: f64,
    pub delta_sup: f64,
    pub gamma_sup: f64,
    pub lambda_threshold: f64,
    /// `q / 2`, the rate with Gaussian noise only.
    pub gaussian_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub p: f64,
    pub q: f64,
    pub kappa: f64,
    pub chi: f64,
    pub p_x: f64,
    pub c_diss: f64,
    pub b_sup: f64,
}

pub fn predict_rates(inp: &RateInputs) -> Result<RatePrediction> {
    Ok(RatePrediction {
        bar_delta: rate_bar_delta(inp.p, inp.q, inp.chi)?,
        delta_sup: rate_delta_sup(inp.p, inp.q, inp.chi)?,
        gamma_sup: rate_gamma_sup(inp.p, inp.kappa, inp.chi, inp.p_x)?,
        lambda_threshold: lambda_threshold(inp.c_diss, inp.b_sup)?,
        gaussian_rate: inp.q / 2.0,
    })
}

/// Stationary density `1 / (pi (x^4 - x^2 + 1))` of `dX = -X^3 dt + dZ`
/// with a standard Cauchy process `Z`.
pub fn stationary_density(x: f64) -> f64 {
    let x2 = x * x;
    1.0 / (PI * (x2 * (x2 - 1.0) + 1.0))
}

#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point
/// Gauss rule.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let s = f(c - r * XGK[i]) + f(c + r * XGK[i]);
        kronrod += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kronrod * r, ((kronrod - gauss) * r).abs())
}

/// Adaptive Gauss-Kronrod integration to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, whole: (f64, f64), depth: u32) -> f64 {
        let (value, err) = whole;
        if err <= tol || depth == 0 || (b - a).abs() < 1e-14 {
            return value;
        }
        let m = 0.5 * (a + b);
        let left = gk15(f, a, m);
        let right = gk15(f, m, b);
        rec(f, a, m, 0.5 * tol, left, depth - 1) + rec(f, m, b, 0.5 * tol, right, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    rec(&f, a, b, tol, gk15(&f, a, b), 60)
}

const QUAD_TOL: f64 = 1e-13;
const TAIL_START: f64 = 10.0;

/// `int_{u0}^{u1} u^e du`.
fn power_integral(e: f64, u0: f64, u1: f64) -> f64 {
    if e == -1.0 {
        (u1 / u0).ln()
    } else {
        (u1.powf(e + 1.0) - u0.powf(e + 1.0)) / (e + 1.0)
    }
}

/// `int_m^k x^p / (x^4 - x^2 + 1) dx` for `m >= 10` (k may be infinite),
/// via `u = 1/x` and `1/(1 - u^2 + u^4) = (1 + u^2) sum_j (-u^6)^j`.
fn tail_integral(p: f64, m: f64, k: f64) -> f64 {
    let (u0, u1) = (1.0 / k, 1.0 / m);
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 0..200 {
        let shift = 6.0 * j as f64;
        let term = power_integral(2.0 - p + shift, u0, u1) + power_integral(4.0 - p + shift, u0, u1);
        sum += sign * term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    sum
}

/// `int |x|^{p_x} m(x) dx` over the real line, or over `[-K, K]` if given.
pub fn stationary_moment(p_x: f64, k: Option<f64>) -> Result<f64> {
    if !(p_x > 0.0 && p_x.is_finite()) {
        return argument(format!("p_X must be positive and finite, got {p_x}"));
    }
    let k = match k {
        None if p_x >= 3.0 => return Err(AnalysisError::Divergent(p_x)),
        None => f64::INFINITY,
        Some(k) if !(k > 0.0) => return argument(format!("truncation radius must be positive, got {k}")),
        Some(k) => k,
    };
    let f = |x: f64| abs_pow(x, p_x) * stationary_density(x);
    let inner = integrate(f, 0.0, k.min(TAIL_START), QUAD_TOL);
    let outer = if k > TAIL_START {
        tail_integral(p_x, TAIL_START, k) / PI
    } else {
        0.0
    };
    Ok(2.0 * (inner + outer))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// `max_k E‖X^n_k - X_k‖^q`.
    SupOfMean,
    /// `E max_k ‖X^n_k - X_k‖^q`.
    MeanOfSup,
}

impl ErrorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorMode::SupOfMean => "sup_of_mean",
            ErrorMode::MeanOfSup => "mean_of_sup",
        }
    }
}

impl fmt::Display for ErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "sup_of_mean" | "supofmean" => Ok(ErrorMode::SupOfMean),
            "mean_of_sup" | "meanofsup" => Ok(ErrorMode::MeanOfSup),
            other => Err(format!("unknown error mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub n: usize,
    pub h: f64,
    pub error: f64,
    pub std_error: f64,
    /// Paths excluded because the coarse or the reference path was censored.
    pub excluded: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub points: Vec<ErrorPoint>,
    pub fitted_slope: f64,
    pub fit_intercept: f64,
    pub q: f64,
    pub mode: ErrorMode,
}

/// Least-squares line through `(ln h, ln error)` over the points with a
/// positive finite error. Returns `(slope, intercept)`, NaN with fewer than
/// two such points.
pub fn fit_log_log(points: &[ErrorPoint]) -> (f64, f64) {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.error > 0.0 && p.error.is_finite())
        .map(|p| (p.h.ln(), p.error.ln()))
        .collect();
    if xy.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|v| v.0).sum::<f64>() / n;
    let my = xy.iter().map(|v| v.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|v| (v.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongErrorConfig {
    pub scheme: SchemeKind,
    /// Scheme run on the fine grid as the stand-in for the exact solution.
    pub reference: SchemeKind,
    pub q: f64,
    pub n_list: Vec<usize>,
    pub n_ref: usize,
    pub n_paths: usize,
    pub t_end: f64,
    pub x0: Vec<f64>,
    pub master_seed: u64,
    pub mode: ErrorMode,
    pub workers: usize,
}

#[derive(Clone, Debug)]
struct LevelStats {
    sup: MomentAccumulator,
    /// One accumulator per coarse grid index.
    per_index: Vec<MomentAccumulator>,
    excluded: u64,
}

impl LevelStats {
    fn merge(mut self, other: &Self) -> Self {
        self.sup.merge(&other.sup);
        for (a, b) in self.per_index.iter_mut().zip(&other.per_index) {
            a.merge(b);
        }
        self.excluded += other.excluded;
        self
    }
}

/// Coupled strong-error study: each coarse path is driven by the aggregated
/// increments of its reference path.
pub fn strong_error_study(model: &SdeModel, cfg: &StrongErrorConfig) -> Result<ErrorCurve> {
    if !(cfg.q > 0.0) {
        return argument(format!("q must be positive, got {}", cfg.q));
    }
    if cfg.n_list.is_empty() || cfg.n_paths == 0 || cfg.workers == 0 {
        return argument("n_list, n_paths and workers must be nonempty / positive");
    }
    if let Some(&bad) = cfg.n_list.iter().find(|&&n| n == 0 || !cfg.n_ref.is_multiple_of(n)) {
        return argument(format!("n = {bad} does not divide n_ref = {}", cfg.n_ref));
    }
    if cfg.x0.len() != model.dim {
        return argument(format!("x0 has {} entries, model dimension is {}", cfg.x0.len(), model.dim));
    }
    let fine = Grid::new(cfg.t_end, cfg.n_ref)?;
    let generator = NoiseGenerator::new(model.noise, cfg.master_seed, fine.h())?;
    let dim = model.dim;
    let sup_of_mean = cfg.mode == ErrorMode::SupOfMean;

    let empty_levels = || -> Vec<LevelStats> {
        cfg.n_list
            .iter()
            .map(|&n| LevelStats {
                sup: MomentAccumulator::default(),
                per_index: vec![MomentAccumulator::default(); if sup_of_mean { n + 1 } else { 0 }],
                excluded: 0,
            })
            .collect()
    };

    let chunks = map_chunks(cfg.n_paths, CHUNK_PATHS, cfg.workers, |range| {
        let mut levels = empty_levels();
        let mut noise = NoiseGrid::zeros(cfg.n_ref, fine.h(), model.noise.brownian_dim, model.noise.levy_dim)
            .expect("valid fine grid");
        let mut errs = Vec::new();
        for path in range {
            noise.refill(&generator, path as u64);
            let reference = simulate_path(model, cfg.reference, &fine, &noise, &cfg.x0).expect("dimensions checked");
            for (level, &n) in levels.iter_mut().zip(&cfg.n_list) {
                let ratio = cfg.n_ref / n;
                let coarse = aggregate_to_coarse(&noise, ratio).expect("nested grids");
                let mut stepper = PathStepper::new(model, cfg.scheme, coarse.h());
                let mut x = cfg.x0.clone();
                errs.clear();
                errs.push(0.0);
                let mut ok = reference.status.censored_from().is_none();
                for k in 0..n {
                    if !ok {
                        break;
                    }
                    ok = matches!(stepper.advance(&mut x, coarse.db(k), coarse.dz(k)), Ok(true));
                    let r = reference.state((k + 1) * ratio);
                    let d: Vec<f64> = (0..dim).map(|i| x[i] - r[i]).collect();
                    errs.push(norm(&d));
                }
                if !ok {
                    level.excluded += 1;
                    continue;
                }
                let sup = errs.iter().fold(0.0f64, |m, &e| m.max(e));
                level.sup.push(abs_pow(sup, cfg.q));
                if sup_of_mean {
                    for (acc, &e) in level.per_index.iter_mut().zip(&errs) {
                        acc.push(abs_pow(e, cfg.q));
                    }
                }
            }
        }
        levels
    });
    let total = tree_reduce(chunks, |a, b| a.into_iter().zip(&b).map(|(x, y)| x.merge(y)).collect())
        .expect("at least one chunk");

    let points: Vec<ErrorPoint> = total
        .iter()
        .zip(&cfg.n_list)
        .map(|(level, &n)| {
            let acc = if sup_of_mean {
                level
                    .per_index
                    .iter()
                    .filter(|a| a.count() > 0)
                    .fold(None::<&MomentAccumulator>, |best, a| match best {
                        Some(b) if a.mean() <= b.mean() => Some(b),
                        _ => Some(a),
                    })
                    .copied()
                    .unwrap_or_default()
            } else {
                level.sup
            };
            ErrorPoint {
                n,
                h: cfg.t_end / n as f64,
                error: acc.mean(),
                std_error: acc.std_error(),
                excluded: level.excluded,
            }
        })
        .collect();
    let (fitted_slope, fit_intercept) = fit_log_log(&points);
    Ok(ErrorCurve {
        points,
        fitted_slope,
        fit_intercept,
        q: cfg.q,
        mode: cfg.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_builtin_model;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn rate_examples() {
        assert_eq!(rate_bar_delta(1.0, 0.5, 2.0).unwrap(), 0.25);
        assert_eq!(rate_bar_delta(5.0, 3.0, 0.0).unwrap(), 1.0);
        assert!(rate_bar_delta(2.0, 1.999999, 2.0).unwrap() < 1e-6);
        assert!(rate_bar_delta(1.0, 1.0, 2.0).is_err());
        assert_eq!(rate_delta_sup(1.0, 0.5, 2.0).unwrap(), 0.125);
        assert_eq!(rate_delta_sup(5.0, 3.0, 0.0).unwrap(), 0.5);
        assert_relative_eq!(rate_gamma_sup(1.0, 3.0, 2.0, 2.0).unwrap(), 0.1, max_relative = 1e-15);
        assert_eq!(rate_gamma_sup(10.0, 3.0, 2.0, 10.0).unwrap(), 0.5);
        assert!(rate_gamma_sup(1.0, 3.0, 2.0, 3.0 - 1e-12).unwrap() < 1e-11);
        assert!(rate_gamma_sup(1.0, 3.0, 2.0, 3.0).is_err());
        assert!(rate_gamma_sup(1.0, 3.0, 2.0, 0.5).is_err());
        assert_eq!(lambda_threshold(1.0, 1.0).unwrap(), 2.0);
        assert_relative_eq!(lambda_threshold(1.0, 2f64.sqrt()).unwrap(), 1.0, max_relative = 1e-15);
        assert_eq!(lambda_threshold(1.0, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(systematic_error_order(2.5, 3.0, 1.0).unwrap(), 0.25);
        assert_eq!(systematic_error_order(3.0, 3.0, 1.0).unwrap(), 0.0);
        assert_eq!(systematic_error_order(1.0, 3.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn density_values() {
        assert_relative_eq!(stationary_density(0.0), std::f64::consts::FRAC_1_PI, max_relative = 1e-15);
        assert_eq!(stationary_density(1.0), stationary_density(0.0));
        assert_relative_eq!(integrate(stationary_density, -1e3, 1e3, 1e-12), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn gauss_kronrod_is_exact_for_low_degree() {
        let v = integrate(|x| 3.0 * x.powi(20) - x.powi(7) + 2.0, -1.0, 2.0, 1e-12);
        let exact = 3.0 * (2f64.powi(21) + 1.0) / 21.0 - (2f64.powi(8) - 1.0) / 8.0 + 6.0;
        assert_relative_eq!(v, exact, max_relative = 1e-14);
    }

    #[test]
    fn closed_form_moments() {
        let s = (2.0f64 / 3.0).sqrt();
        for (p, exact) in [
            (0.5, s),
            (1.0, 4.0 * 3f64.sqrt() / 9.0),
            (1.5, s),
            (2.0, 1.0),
            (2.5, 2.0 * s),
        ] {
            let v = stationary_moment(p, None).unwrap();
            assert!((v - exact).abs() < 1e-9, "p = {p}: {v} vs {exact}");
        }
        assert_eq!(stationary_moment(3.0, None), Err(AnalysisError::Divergent(3.0)));
        assert!(stationary_moment(4.0, Some(50.0)).unwrap().is_finite());
    }

    #[test]
    fn truncated_moments_agree_with_direct_quadrature() {
        for p in [0.5, 1.0, 2.5, 3.0, 4.0] {
            for k in [7.0, 22.36, 200.0] {
                let direct = 2.0 * integrate(|x| abs_pow(x, p) * stationary_density(x), 0.0, k, 1e-12);
                let v = stationary_moment(p, Some(k)).unwrap();
                assert_relative_eq!(v, direct, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn fit_skips_zero_errors() {
        let pts: Vec<ErrorPoint> = [1.0, 0.5, 0.25, 0.125]
            .iter()
            .enumerate()
            .map(|(i, &h)| ErrorPoint {
                n: i,
                h,
                error: if i == 0 { 0.0 } else { 3.0 * h * h },
                std_error: 0.0,
                excluded: 0,
            })
            .collect();
        let (s, c) = fit_log_log(&pts);
        assert_relative_eq!(s, 2.0, max_relative = 1e-12);
        assert_relative_eq!(c, 3f64.ln(), max_relative = 1e-12);
    }

    fn small_study(scheme: SchemeKind, mode: ErrorMode) -> StrongErrorConfig {
        StrongErrorConfig {
            scheme,
            reference: scheme,
            q: 1.0,
            n_list: vec![4, 8, 16, 32],
            n_ref: 32,
            n_paths: 50,
            t_end: 1.0,
            x0: vec![0.3],
            master_seed: 11,
            mode,
            workers: 2,
        }
    }

    #[test]
    fn identical_grid_has_zero_error() {
        let model = make_builtin_model("cauchy_cubic", &BTreeMap::new()).unwrap();
        for mode in [ErrorMode::MeanOfSup, ErrorMode::SupOfMean] {
            let curve = strong_error_study(&model, &small_study(SchemeKind::Splitting, mode)).unwrap();
            let last = curve.points.last().unwrap();
            assert_eq!(last.n, 32);
            assert_eq!(last.error, 0.0);
            assert!(curve.points[0].error > 0.0);
        }
    }

    #[test]
    fn non_nested_grid_is_rejected() {
        let model = make_builtin_model("gaussian_cubic", &BTreeMap::new()).unwrap();
        let cfg = StrongErrorConfig {
            n_list: vec![3, 8],
            ..small_study(SchemeKind::Splitting, ErrorMode::MeanOfSup)
        };
        assert!(matches!(strong_error_study(&model, &cfg), Err(AnalysisError::Argument(_))));
    }

    #[test]
    fn additive_noise_without_drift_couples_exactly() {
        let mut model = make_builtin_model("gaussian_cubic", &BTreeMap::new()).unwrap();
        model.drift_superlinear = std::sync::Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0));
        let cfg = small_study(SchemeKind::ExplicitEuler, ErrorMode::SupOfMean);
        let curve = strong_error_study(&model, &cfg).unwrap();
        for p in &curve.points {
            assert!(p.error < 1e-14, "{p:?}");
        }
    }

    #[test]
    fn study_is_worker_independent() {
        let model = make_builtin_model("gaussian_cubic", &BTreeMap::new()).unwrap();
        let cfg = StrongErrorConfig {
            n_paths: 600,
            ..small_study(SchemeKind::Splitting, ErrorMode::SupOfMean)
        };
        let a = strong_error_study(&model, &cfg).unwrap();
        let b = strong_error_study(&model, &StrongErrorConfig { workers: 5, ..cfg }).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    proptest! {
        #[test]
        fn delta_sup_below_bar_delta(p in 0.01f64..10.0, frac in 0.001f64..0.999, chi in 0.0f64..6.0) {
            let q = p * frac;
            prop_assert!(rate_delta_sup(p, q, chi).unwrap() <= rate_bar_delta(p, q, chi).unwrap());
        }

        #[test]
        fn gamma_branches_meet(chi in 0.0f64..8.0, kappa in 1.01f64..8.0, frac in 0.0f64..0.999) {
            let p = chi + 2.0;
            let p_x = p + frac * (kappa - 1.0);
            let gap = p + kappa - 1.0 - p_x;
            let first = p * gap / ((chi + 2.0) * (kappa - 1.0) + chi * p);
            let second = gap / (kappa + chi - 1.0);
            prop_assert!((first - second).abs() <= 1e-12 * second.abs().max(1e-300));
            let at = rate_gamma_sup(p, kappa, chi, p_x).unwrap();
            let above = rate_gamma_sup(p * (1.0 + 1e-13), kappa, chi, p_x).unwrap();
            prop_assert!((at - above).abs() <= 1e-10);
        }

        #[test]
        fn gamma_positive_iff_below_threshold(p in 0.1f64..6.0, kappa in 1.1f64..6.0, chi in 0.0f64..4.0, frac in 0.0f64..0.999) {
            let p_x = p + frac * (kappa - 1.0);
            prop_assert!(rate_gamma_sup(p, kappa, chi, p_x).unwrap() > 0.0);
        }

        #[test]
        fn lambda_scales_linearly(c in 0.01f64..100.0, b in 0.01f64..100.0, s in 0.01f64..100.0) {
            let a = lambda_threshold(s * c, b).unwrap();
            let e = s * lambda_threshold(c, b).unwrap();
            prop_assert!((a - e).abs() <= 1e-13 * e);
        }

        #[test]
        fn density_is_even_and_positive(x in -1e6f64..1e6) {
            prop_assert_eq!(stationary_density(x), stationary_density(-x));
            prop_assert!(stationary_density(x) > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn truncated_moment_grows_to_full(p in 0.2f64..2.9, k in 0.5f64..1e4, dk in 0.0f64..1e3) {
            let a = stationary_moment(p, Some(k)).unwrap();
            let b = stationary_moment(p, Some(k + dk)).unwrap();
            let full = stationary_moment(p, None).unwrap();
            prop_assert!(a <= b + 1e-12);
            prop_assert!(b <= full + 1e-12);
        }
    }
}
