//! Coefficient bundles `dX = (A(X) + a(X)) dt + b(X) dB + c(X) dZ` and the
//! built-in example models.

use crate::flow::{self, norm, FlowMap, VectorFn};
use crate::noise::{LevyKind, NoiseSpec, StreamKey};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// A matrix field `x -> M(x)`, written row-major into `out`.
pub type MatrixFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameter for model `{model}`: {reason}")]
    InvalidParam { model: String, reason: String },
}

#[derive(Clone)]
pub enum VectorField {
    Zero,
    Function(VectorFn),
}

impl VectorField {
    pub fn function(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        VectorField::Function(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, VectorField::Zero)
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            VectorField::Zero => out.fill(0.0),
            VectorField::Function(f) => f(x, out),
        }
    }
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorField::Zero => write!(f, "Zero"),
            VectorField::Function(_) => write!(f, "Function"),
        }
    }
}

/// A `rows x cols` matrix-valued coefficient.
#[derive(Clone)]
pub enum MatrixField {
    Zero,
    Constant(Vec<f64>),
    Function(MatrixFn),
}

impl MatrixField {
    pub fn function(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        MatrixField::Function(Arc::new(f))
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        MatrixField::Constant(m)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MatrixField::Zero)
    }

    /// True when the field does not depend on the state.
    pub fn is_constant(&self) -> bool {
        !matches!(self, MatrixField::Function(_))
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            MatrixField::Zero => out.fill(0.0),
            MatrixField::Constant(m) => out.copy_from_slice(m),
            MatrixField::Function(f) => f(x, out),
        }
    }

    /// `out += M(x) v`. `scratch` must hold `out.len() * v.len()` entries.
    #[inline]
    pub fn add_product(&self, x: &[f64], v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let cols = v.len();
        let m: &[f64] = match self {
            MatrixField::Zero => return,
            MatrixField::Constant(m) => m,
            MatrixField::Function(f) => {
                f(x, scratch);
                scratch
            }
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &m[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for (mij, vj) in row.iter().zip(v) {
                acc += mij * vj;
            }
            *o += acc;
        }
    }
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixField::Zero => write!(f, "Zero"),
            MatrixField::Constant(m) => write!(f, "Constant({m:?})"),
            MatrixField::Function(_) => write!(f, "Function"),
        }
    }
}

/// Structural constants of the superlinear drift `A`:
/// `<A(x), x> <= -c1 |x|^{1+kappa} + c2`, `<A(x) - A(y), x - y> <= L |x - y|^2`
/// and `|A_x(x)| <= C (1 + |x|^chi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    pub kappa: f64,
    pub chi: f64,
    pub lipschitz: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Declared sup-norms of the bounded coefficients `a`, `b`, `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub a_sup: f64,
    pub b_sup: f64,
    pub c_sup: f64,
}

#[derive(Clone)]
pub struct SdeModel {
    pub name: String,
    pub dim: usize,
    pub noise: NoiseSpec,
    /// Superlinear dissipative part `A`.
    pub drift_superlinear: VectorFn,
    /// Jacobian `A_x`, row-major, when known.
    pub drift_superlinear_grad: Option<MatrixFn>,
    /// Bounded Lipschitz part `a`.
    pub drift_bounded: VectorField,
    /// `dim x brownian_dim`.
    pub diffusion: MatrixField,
    /// `dim x levy_dim`.
    pub jump: MatrixField,
    pub constants: DriftConstants,
    pub bounds: CoefficientBounds,
    pub flow: FlowMap,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise", &self.noise)
            .field("drift_bounded", &self.drift_bounded)
            .field("diffusion", &self.diffusion)
            .field("jump", &self.jump)
            .field("constants", &self.constants)
            .field("bounds", &self.bounds)
            .field("flow", &self.flow)
            .finish_non_exhaustive()
    }
}

impl SdeModel {
    pub fn eval_superlinear(&self, x: &[f64], out: &mut [f64]) {
        (self.drift_superlinear)(x, out)
    }

    pub fn has_jumps(&self) -> bool {
        self.noise.levy != LevyKind::None && self.noise.levy_dim > 0 && !self.jump.is_zero()
    }
}

/// Exponents entering the rate statements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    /// Moment order of the Lévy measure.
    pub p: f64,
    /// Target moment of the solution, in `(0, p + kappa - 1)`.
    pub p_x: f64,
    /// Error moment, in `(0, p)`.
    pub q: f64,
    pub lambda_exp: f64,
    /// Hessian constant of the drift regularity condition; recorded only.
    pub epsilon_hess: f64,
}

impl RateParams {
    pub fn validate(&self, kappa: f64) -> Result<(), String> {
        if !(self.p > 0.0) {
            return Err(format!("p must be positive, got {}", self.p));
        }
        if !(self.q > 0.0 && self.q < self.p) {
            return Err(format!("q must lie in (0, p), got {}", self.q));
        }
        if !(self.p_x > 0.0 && self.p_x < self.p + kappa - 1.0) {
            return Err(format!(
                "p_X must lie in (0, p + kappa - 1) = (0, {}), got {}",
                self.p + kappa - 1.0,
                self.p_x
            ));
        }
        if !(self.lambda_exp >= 0.0) || !(self.epsilon_hess > 0.0) {
            return Err("lambda must be >= 0 and epsilon > 0".into());
        }
        Ok(())
    }
}

pub const BUILTIN_MODELS: [&str; 5] = ["cauchy_cubic", "sine_cubic", "gaussian_cubic", "radial_poly", "frozen_lorenz"];

const DEFAULT_CAUCHY_P: f64 = 0.99;

struct Params<'a> {
    model: &'a str,
    map: &'a BTreeMap<String, f64>,
    allowed: &'static [&'static str],
}

impl<'a> Params<'a> {
    fn new(model: &'a str, map: &'a BTreeMap<String, f64>, allowed: &'static [&'static str]) -> Result<Self, ModelError> {
        if let Some(bad) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ModelError::InvalidParam {
                model: model.into(),
                reason: format!("unknown parameter `{bad}` (allowed: {})", allowed.join(", ")),
            });
        }
        Ok(Self { model, map, allowed })
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        debug_assert!(self.allowed.contains(&key));
        self.map.get(key).copied().unwrap_or(default)
    }

    fn err(&self, reason: impl Into<String>) -> ModelError {
        ModelError::InvalidParam {
            model: self.model.into(),
            reason: reason.into(),
        }
    }

    fn positive_int(&self, key: &str, default: f64) -> Result<u32, ModelError> {
        let v = self.get(key, default);
        if v >= 1.0 && v.fract() == 0.0 && v <= 32.0 {
            Ok(v as u32)
        } else {
            Err(self.err(format!("`{key}` must be a positive integer, got {v}")))
        }
    }

    fn moment(&self) -> Result<f64, ModelError> {
        let p = self.get("p", DEFAULT_CAUCHY_P);
        if p > 0.0 && p < 1.0 {
            Ok(p)
        } else {
            Err(self.err(format!("Cauchy noise needs p in (0, 1), got {p}")))
        }
    }
}

fn cubic_drift() -> VectorFn {
    Arc::new(|x: &[f64], out: &mut [f64]| out[0] = -x[0] * x[0] * x[0])
}

fn cubic_grad() -> MatrixFn {
    Arc::new(|x: &[f64], out: &mut [f64]| out[0] = -3.0 * x[0] * x[0])
}

fn cubic_constants() -> DriftConstants {
    DriftConstants {
        kappa: 3.0,
        chi: 2.0,
        lipschitz: 0.0,
        c1: 1.0,
        c2: 0.0,
    }
}

/// Builds one of [`BUILTIN_MODELS`].
///
/// Parameters (all optional):
/// * `cauchy_cubic`: `p` (noise moment, default 0.99).
/// * `sine_cubic`: `p`.
/// * `gaussian_cubic`: `sigma` (default 1; 0 gives the deterministic ODE).
/// * `radial_poly`: `n` (default 1), `dim` (default 2), `p`.
/// * `frozen_lorenz`: `n` (default 1), `b` (default 1), `c` (default 0.5),
///   `p`, `tol`, `max_substeps`.
pub fn make_builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<SdeModel, ModelError> {
    match name {
        "cauchy_cubic" => {
            let prm = Params::new(name, params, &["p"])?;
            Ok(SdeModel {
                name: name.into(),
                dim: 1,
                noise: NoiseSpec::cauchy(1, prm.moment()?),
                drift_superlinear: cubic_drift(),
                drift_superlinear_grad: Some(cubic_grad()),
                drift_bounded: VectorField::Zero,
                diffusion: MatrixField::Zero,
                jump: MatrixField::Constant(vec![1.0]),
                constants: cubic_constants(),
                bounds: CoefficientBounds {
                    a_sup: 0.0,
                    b_sup: 0.0,
                    c_sup: 1.0,
                },
                flow: FlowMap::cubic(),
            })
        }
        "sine_cubic" => {
            let prm = Params::new(name, params, &["p"])?;
            Ok(SdeModel {
                name: name.into(),
                dim: 1,
                noise: NoiseSpec::cauchy(1, prm.moment()?),
                drift_superlinear: cubic_drift(),
                drift_superlinear_grad: Some(cubic_grad()),
                drift_bounded: VectorField::function(|x, out| out[0] = x[0].sin()),
                diffusion: MatrixField::Zero,
                jump: MatrixField::Constant(vec![1.0]),
                constants: cubic_constants(),
                bounds: CoefficientBounds {
                    a_sup: 1.0,
                    b_sup: 0.0,
                    c_sup: 1.0,
                },
                flow: FlowMap::cubic(),
            })
        }
        "gaussian_cubic" => {
            let prm = Params::new(name, params, &["sigma"])?;
            let sigma = prm.get("sigma", 1.0);
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(prm.err(format!("sigma must be nonnegative, got {sigma}")));
            }
            Ok(SdeModel {
                name: name.into(),
                dim: 1,
                noise: NoiseSpec::brownian(1),
                drift_superlinear: cubic_drift(),
                drift_superlinear_grad: Some(cubic_grad()),
                drift_bounded: VectorField::Zero,
                diffusion: MatrixField::Constant(vec![sigma]),
                jump: MatrixField::Zero,
                constants: cubic_constants(),
                bounds: CoefficientBounds {
                    a_sup: 0.0,
                    b_sup: sigma,
                    c_sup: 0.0,
                },
                flow: FlowMap::cubic(),
            })
        }
        "radial_poly" => {
            let prm = Params::new(name, params, &["n", "dim", "p"])?;
            let n = prm.positive_int("n", 1.0)?;
            let dim = prm.positive_int("dim", 2.0)? as usize;
            let exponent = 2 * n as i32;
            let drift: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
                let r2n = norm(x).powi(exponent);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -r2n * xi;
                }
            });
            let grad: MatrixFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
                // A_x = -|x|^{2n} I - 2n |x|^{2n-2} x x^T
                let d = x.len();
                let r = norm(x);
                let r2n = r.powi(exponent);
                let r2n2 = if n == 1 { 1.0 } else { r.powi(exponent - 2) };
                for i in 0..d {
                    for j in 0..d {
                        let diag = if i == j { r2n } else { 0.0 };
                        out[i * d + j] = -diag - f64::from(exponent) * r2n2 * x[i] * x[j];
                    }
                }
            });
            Ok(SdeModel {
                name: name.into(),
                dim,
                noise: NoiseSpec::cauchy(dim, prm.moment()?),
                drift_superlinear: drift,
                drift_superlinear_grad: Some(grad),
                drift_bounded: VectorField::Zero,
                diffusion: MatrixField::Zero,
                jump: MatrixField::identity(dim),
                constants: DriftConstants {
                    kappa: f64::from(2 * n + 1),
                    chi: f64::from(2 * n),
                    lipschitz: 0.0,
                    c1: 1.0,
                    c2: 0.0,
                },
                bounds: CoefficientBounds {
                    a_sup: 0.0,
                    b_sup: 0.0,
                    c_sup: (dim as f64).sqrt(),
                },
                flow: FlowMap::radial(n),
            })
        }
        "frozen_lorenz" => {
            let prm = Params::new(name, params, &["n", "b", "c", "p", "tol", "max_substeps"])?;
            let n = prm.positive_int("n", 1.0)?;
            let b = prm.get("b", 1.0);
            let c = prm.get("c", 0.5);
            let tol = prm.get("tol", flow::DEFAULT_TOL);
            let max_substeps = prm.get("max_substeps", flow::DEFAULT_MAX_SUBSTEPS as f64);
            if !(b > 0.0 && b.is_finite()) || !c.is_finite() {
                return Err(prm.err(format!("need b > 0 and finite c, got b = {b}, c = {c}")));
            }
            if !(tol > 0.0) || !(max_substeps >= 1.0) {
                return Err(prm.err("tol must be positive and max_substeps at least 1"));
            }
            let power = 2 * n as i32 + 1;
            let drift: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
                let (y, z) = (x[0], x[1]);
                out[0] = -y.powi(power) + c * y - b * c * z;
                out[1] = -z.powi(power) + b * c * y + c * z;
            });
            let grad: MatrixFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
                let k = f64::from(power);
                out[0] = -k * x[0].powi(power - 1) + c;
                out[1] = -b * c;
                out[2] = b * c;
                out[3] = -k * x[1].powi(power - 1) + c;
            });
            // y^{2n+2} + z^{2n+2} >= 2^{-n} |x|^{2n+2}; half of that absorbs
            // c|x|^2 up to the constant c2.
            let (c1, c2) = if c <= 0.0 {
                (0.5f64.powi(n as i32), 0.0)
            } else {
                let c1 = 0.5f64.powi(n as i32 + 1);
                let s = (c / ((f64::from(n) + 1.0) * c1)).powf(1.0 / f64::from(n));
                (c1, c * s * f64::from(n) / (f64::from(n) + 1.0))
            };
            let lipschitz = c.max(0.0);
            Ok(SdeModel {
                name: name.into(),
                dim: 2,
                noise: NoiseSpec::cauchy(2, prm.moment()?),
                drift_superlinear: drift.clone(),
                drift_superlinear_grad: Some(grad),
                drift_bounded: VectorField::Zero,
                diffusion: MatrixField::Zero,
                jump: MatrixField::identity(2),
                constants: DriftConstants {
                    kappa: f64::from(power),
                    chi: f64::from(2 * n),
                    lipschitz,
                    c1,
                    c2,
                },
                bounds: CoefficientBounds {
                    a_sup: 0.0,
                    b_sup: 0.0,
                    c_sup: 2f64.sqrt(),
                },
                flow: FlowMap::numeric_with(drift, lipschitz, 0.0, tol, max_substeps as usize),
            })
        }
        other => Err(ModelError::UnknownModel(other.into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    /// Smallest slack of the inequality over the samples (negative = violated).
    pub worst_margin: f64,
    /// Worst margin divided by the magnitude of the terms compared.
    pub worst_relative_margin: f64,
    pub passed: bool,
}

impl HypothesisCheck {
    fn new() -> Self {
        Self {
            worst_margin: f64::INFINITY,
            worst_relative_margin: f64::INFINITY,
            passed: true,
        }
    }

    fn record(&mut self, margin: f64, scale: f64) {
        let rel = margin / scale.max(1.0);
        self.worst_margin = self.worst_margin.min(margin);
        self.worst_relative_margin = self.worst_relative_margin.min(rel);
        if !(rel >= -RELATIVE_SLACK) {
            self.passed = false;
        }
    }
}

/// Rounding allowance for comparing large polynomial terms.
const RELATIVE_SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub model: String,
    pub n_samples: usize,
    pub radius: f64,
    pub dissipativity: HypothesisCheck,
    pub one_sided_lipschitz: HypothesisCheck,
    pub a_bound: HypothesisCheck,
    pub b_bound: HypothesisCheck,
    pub c_bound: HypothesisCheck,
    /// `kappa <= chi + 1`.
    pub kappa_chi_consistent: bool,
    /// `max |A_x(x)| / (1 + |x|^chi)` over the samples, when `A_x` is known.
    pub gradient_growth_ratio: Option<f64>,
}

impl HypothesisReport {
    pub fn all_passed(&self) -> bool {
        self.dissipativity.passed
            && self.one_sided_lipschitz.passed
            && self.a_bound.passed
            && self.b_bound.passed
            && self.c_bound.passed
            && self.kappa_chi_consistent
    }
}

fn sample_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let r = norm(out);
    let u: f64 = rng.random();
    let target = radius * u.powf(1.0 / dim as f64);
    for v in out.iter_mut() {
        *v *= if r > 0.0 { target / r } else { 0.0 };
    }
}

fn frobenius(m: &[f64]) -> f64 {
    norm(m)
}

/// Falsification-style check of the drift hypotheses at `n_samples` points
/// (and pairs) drawn uniformly from the ball of the given radius.
pub fn check_hypotheses(model: &SdeModel, n_samples: usize, radius: f64, key: StreamKey) -> HypothesisReport {
    let d = model.dim;
    let k = model.constants;
    let mut rng = key.stream();
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    let (mut ax, mut ay) = (vec![0.0; d], vec![0.0; d]);
    let mut diss = HypothesisCheck::new();
    let mut osl = HypothesisCheck::new();
    let mut a_chk = HypothesisCheck::new();
    let mut b_chk = HypothesisCheck::new();
    let mut c_chk = HypothesisCheck::new();
    let mut grad_ratio: Option<f64> = None;
    let bd = model.noise.brownian_dim;
    let ld = model.noise.levy_dim;
    let mut bm = vec![0.0; d * bd];
    let mut cm = vec![0.0; d * ld];
    let mut gm = vec![0.0; d * d];

    for _ in 0..n_samples.max(1) {
        sample_ball(&mut rng, d, radius, &mut x);
        sample_ball(&mut rng, d, radius, &mut y);
        model.eval_superlinear(&x, &mut ax);
        model.eval_superlinear(&y, &mut ay);

        let r = norm(&x);
        let inner: f64 = ax.iter().zip(&x).map(|(a, b)| a * b).sum();
        let growth = k.c1 * r.powf(1.0 + k.kappa);
        diss.record(-inner - growth + k.c2, inner.abs() + growth + k.c2);

        let mut cross = 0.0;
        let mut dist2 = 0.0;
        let mut scale = 0.0;
        for i in 0..d {
            let dx = x[i] - y[i];
            cross += (ax[i] - ay[i]) * dx;
            scale += (ax[i].abs() + ay[i].abs()) * dx.abs();
            dist2 += dx * dx;
        }
        osl.record(k.lipschitz * dist2 - cross, scale + k.lipschitz * dist2);

        let mut a_val = vec![0.0; d];
        model.drift_bounded.eval(&x, &mut a_val);
        a_chk.record(model.bounds.a_sup - norm(&a_val), model.bounds.a_sup);
        model.diffusion.eval(&x, &mut bm);
        b_chk.record(model.bounds.b_sup - frobenius(&bm), model.bounds.b_sup);
        model.jump.eval(&x, &mut cm);
        c_chk.record(model.bounds.c_sup - frobenius(&cm), model.bounds.c_sup);

        if let Some(g) = &model.drift_superlinear_grad {
            g(&x, &mut gm);
            let ratio = frobenius(&gm) / (1.0 + r.powf(k.chi));
            grad_ratio = Some(grad_ratio.map_or(ratio, |m| m.max(ratio)));
        }
    }

    HypothesisReport {
        model: model.name.clone(),
        n_samples,
        radius,
        dissipativity: diss,
        one_sided_lipschitz: osl,
        a_bound: a_chk,
        b_bound: b_chk,
        c_bound: c_chk,
        kappa_chi_consistent: k.kappa <= k.chi + 1.0,
        gradient_growth_ratio: grad_ratio,
    }
}
