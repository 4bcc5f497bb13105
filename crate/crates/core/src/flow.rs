//! Solution operator `Phi(t, x)` of the deterministic ODE `x' = A(x)`.
//!
//! The splitting schemes only ever need `Phi` over one time step, so the
//! analytic flows are evaluated in closed form and anything else goes through
//! a guarded explicit RK4 integrator with step doubling.

use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// A vector field `x -> out`, both of the model dimension.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_SUBSTEPS: usize = 1 << 20;

/// Beyond this magnitude the cubic flow switches to its reciprocal form so
/// that `x^2` never overflows.
const CUBIC_LARGE_X: f64 = 1e8;
/// Stiffness guard for the first RK4 substep: `tau_0 = theta / (1 + |A(x)|)`.
const RK4_THETA: f64 = 0.5;
const RK4_SAFETY: f64 = 1e-2;
/// Relative slack allowed on the a-posteriori norm bound.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("flow integration needed more than {max_substeps} substeps (t = {t})")]
    Divergence { t: f64, max_substeps: usize },
    #[error("invalid flow argument: {0}")]
    InvalidArgument(String),
}

/// Euclidean norm, rescaled when the squares would over- or underflow.
pub fn norm(x: &[f64]) -> f64 {
    if let [v] = x {
        return v.abs();
    }
    let plain = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if plain.is_finite() && plain > 1e-150 {
        return plain;
    }
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return if x.iter().any(|v| v.is_nan()) { f64::NAN } else { m };
    }
    m * x.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}

/// `(e^{Lt} - 1) / L`, continued by `t` at `L = 0`.
pub fn growth_factor(lipschitz: f64, t: f64) -> f64 {
    if lipschitz == 0.0 {
        t
    } else {
        (lipschitz * t).exp_m1() / lipschitz
    }
}

/// Exact flow of `x' = -x^3`: `x / sqrt(2 t x^2 + 1)`.
#[inline]
pub fn cubic_flow(t: f64, x: f64) -> f64 {
    if x.abs() > CUBIC_LARGE_X {
        x.signum() / (2.0 * t + 1.0 / (x * x)).sqrt()
    } else {
        // the quotient can land one ulp above the return radius
        let k = cubic_return_radius(t);
        (x / (2.0 * t * x * x + 1.0).sqrt()).clamp(-k, k)
    }
}

/// Sharp bound `sup_x |Phi(h, x)| = 1 / sqrt(2h)` of the cubic flow.
#[inline]
pub fn cubic_return_radius(h: f64) -> f64 {
    1.0 / (2.0 * h).sqrt()
}

/// Exact flow of `x' = -|x|^{2n} x`, which shrinks `x` radially to norm
/// `|x| (1 + 2 n t |x|^{2n})^{-1/(2n)}`.
pub fn radial_poly_flow_into(t: f64, x: &[f64], n: u32, out: &mut [f64]) {
    let r = norm(x);
    if r == 0.0 {
        out.fill(0.0);
        return;
    }
    let two_n = 2.0 * f64::from(n);
    let scale = if n == 1 && r <= CUBIC_LARGE_X {
        1.0 / (2.0 * t * r * r + 1.0).sqrt()
    } else if r <= 1.0 {
        (1.0 + two_n * t * r.powf(two_n)).powf(-1.0 / two_n)
    } else {
        // |Phi| = (r^{-2n} + 2 n t)^{-1/(2n)}, stable for huge r
        (r.powf(-two_n) + two_n * t).powf(-1.0 / two_n) / r
    };
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi * scale;
    }
}

pub fn radial_poly_flow(t: f64, x: &[f64], n: u32) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    radial_poly_flow_into(t, x, n, &mut out);
    out
}

fn rk4_step(drift: &dyn Fn(&[f64], &mut [f64]), y: &[f64], tau: f64, ws: &mut Rk4Scratch, out: &mut [f64]) {
    let d = y.len();
    let Rk4Scratch { k1, k2, k3, k4, tmp, .. } = ws;
    drift(y, k1);
    for i in 0..d {
        tmp[i] = y[i] + 0.5 * tau * k1[i];
    }
    drift(tmp, k2);
    for i in 0..d {
        tmp[i] = y[i] + 0.5 * tau * k2[i];
    }
    drift(tmp, k3);
    for i in 0..d {
        tmp[i] = y[i] + tau * k3[i];
    }
    drift(tmp, k4);
    for i in 0..d {
        out[i] = y[i] + tau / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    full: Vec<f64>,
    half: Vec<f64>,
    two_half: Vec<f64>,
}

impl Rk4Scratch {
    fn new(d: usize) -> Self {
        let z = || vec![0.0; d];
        Self {
            k1: z(),
            k2: z(),
            k3: z(),
            k4: z(),
            tmp: z(),
            full: z(),
            half: z(),
            two_half: z(),
        }
    }
}

/// Step-doubling RK4 from `x` over `[0, t]`, substeps capped at `tau_cap`.
/// Every attempted substep counts against `max_substeps`.
fn integrate_rk4(
    t: f64,
    x: &[f64],
    drift: &dyn Fn(&[f64], &mut [f64]),
    tol: f64,
    max_substeps: usize,
    tau_cap: f64,
) -> Result<Vec<f64>, FlowError> {
    let d = x.len();
    let mut y = x.to_vec();
    if t == 0.0 {
        return Ok(y);
    }
    let mut ws = Rk4Scratch::new(d);
    drift(&y, &mut ws.k1);
    let mut tau = t.min(RK4_THETA / (1.0 + norm(&ws.k1))).min(tau_cap);
    let mut elapsed = 0.0;
    let mut attempts = 0usize;
    loop {
        attempts += 1;
        if attempts > max_substeps {
            return Err(FlowError::Divergence { t, max_substeps });
        }
        let remaining = t - elapsed;
        let last = tau >= remaining;
        let step = if last { remaining } else { tau };

        let mut full = std::mem::take(&mut ws.full);
        let mut half = std::mem::take(&mut ws.half);
        let mut two_half = std::mem::take(&mut ws.two_half);
        rk4_step(drift, &y, step, &mut ws, &mut full);
        rk4_step(drift, &y, 0.5 * step, &mut ws, &mut half);
        rk4_step(drift, &half, 0.5 * step, &mut ws, &mut two_half);

        let err = full
            .iter()
            .zip(&two_half)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / 15.0;
        // error per unit time, so the local errors sum to at most `tol`;
        // the safety factor covers steps where the doubling estimate
        // is not yet asymptotic and underestimates the error; the floor
        // keeps the budget above the rounding noise of large states
        let budget = (RK4_SAFETY * tol * (step / t)).max(16.0 * f64::EPSILON * norm(&y));
        let finite = two_half.iter().all(|v| v.is_finite()) && err.is_finite();
        if finite && err <= budget {
            for i in 0..d {
                // local Richardson extrapolation
                y[i] = two_half[i] + (two_half[i] - full[i]) / 15.0;
            }
            elapsed += step;
            ws.full = full;
            ws.half = half;
            ws.two_half = two_half;
            if last {
                return Ok(y);
            }
        } else {
            ws.full = full;
            ws.half = half;
            ws.two_half = two_half;
        }
        let factor = if !finite {
            0.25
        } else if err == 0.0 {
            4.0
        } else {
            (0.9 * (budget / err).powf(0.25)).clamp(0.2, 4.0)
        };
        tau = (step * factor).min(tau_cap);
        if tau <= 0.0 || !tau.is_finite() {
            return Err(FlowError::Divergence { t, max_substeps });
        }
    }
}

/// Adaptive RK4 approximation of the flow of `drift` at time `t`.
pub fn rk4_flow(
    t: f64,
    x: &[f64],
    drift: &dyn Fn(&[f64], &mut [f64]),
    tol: f64,
    max_substeps: usize,
) -> Result<Vec<f64>, FlowError> {
    if !(t >= 0.0) || !(tol > 0.0) {
        return Err(FlowError::InvalidArgument(format!("need t >= 0 and tol > 0, got t = {t}, tol = {tol}")));
    }
    integrate_rk4(t, x, drift, tol, max_substeps, f64::INFINITY)
}

#[derive(Clone)]
pub enum FlowKind {
    CubicScalar,
    RadialPolynomial { n: u32 },
    NumericRk4 {
        drift: VectorFn,
        tol: f64,
        max_substeps: usize,
    },
}

impl fmt::Debug for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowKind::CubicScalar => write!(f, "CubicScalar"),
            FlowKind::RadialPolynomial { n } => write!(f, "RadialPolynomial {{ n: {n} }}"),
            FlowKind::NumericRk4 { tol, max_substeps, .. } => {
                write!(f, "NumericRk4 {{ tol: {tol}, max_substeps: {max_substeps} }}")
            }
        }
    }
}

/// Flow of `x' = A(x)` together with the one-sided Lipschitz constant `L`
/// of `A` and `|A(0)|`, which give the a-posteriori norm bound
/// `|Phi(t,x)| <= |x| e^{Lt} + |A(0)| (e^{Lt} - 1) / L`.
#[derive(Clone, Debug)]
pub struct FlowMap {
    pub kind: FlowKind,
    pub lipschitz: f64,
    pub a0_norm: f64,
}

impl FlowMap {
    pub fn cubic() -> Self {
        Self {
            kind: FlowKind::CubicScalar,
            lipschitz: 0.0,
            a0_norm: 0.0,
        }
    }

    pub fn radial(n: u32) -> Self {
        Self {
            kind: FlowKind::RadialPolynomial { n },
            lipschitz: 0.0,
            a0_norm: 0.0,
        }
    }

    pub fn numeric(drift: VectorFn, lipschitz: f64, a0_norm: f64) -> Self {
        Self::numeric_with(drift, lipschitz, a0_norm, DEFAULT_TOL, DEFAULT_MAX_SUBSTEPS)
    }

    pub fn numeric_with(drift: VectorFn, lipschitz: f64, a0_norm: f64, tol: f64, max_substeps: usize) -> Self {
        Self {
            kind: FlowKind::NumericRk4 {
                drift,
                tol,
                max_substeps,
            },
            lipschitz,
            a0_norm,
        }
    }

    pub fn is_analytic(&self) -> bool {
        !matches!(self.kind, FlowKind::NumericRk4 { .. })
    }

    /// Upper bound on `|Phi(t, x)|` given `|x|`.
    pub fn norm_bound(&self, t: f64, x_norm: f64) -> f64 {
        x_norm * (self.lipschitz * t).exp() + self.a0_norm * growth_factor(self.lipschitz, t)
    }

    fn within_bound(&self, t: f64, x: &[f64], y: &[f64]) -> bool {
        let bound = self.norm_bound(t, norm(x));
        norm(y) <= bound * (1.0 + BOUND_SLACK) + f64::MIN_POSITIVE
    }

    /// Writes `Phi(t, x)` into `out`.
    pub fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), FlowError> {
        match &self.kind {
            FlowKind::CubicScalar => {
                out[0] = cubic_flow(t, x[0]);
            }
            FlowKind::RadialPolynomial { n } => radial_poly_flow_into(t, x, *n, out),
            FlowKind::NumericRk4 {
                drift,
                tol,
                max_substeps,
            } => {
                let mut cap = f64::INFINITY;
                loop {
                    let y = integrate_rk4(t, x, drift.as_ref(), *tol, *max_substeps, cap)?;
                    if self.within_bound(t, x, &y) {
                        out.copy_from_slice(&y);
                        break;
                    }
                    // retry with halved substeps
                    cap = if cap.is_finite() { cap / 2.0 } else { t / 2.0 };
                    if cap * (*max_substeps as f64) < t {
                        return Err(FlowError::Divergence {
                            t,
                            max_substeps: *max_substeps,
                        });
                    }
                }
                return Ok(());
            }
        }
        debug_assert!(self.within_bound(t, x, out), "flow norm bound violated at t = {t}");
        Ok(())
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, FlowError> {
        let mut out = vec![0.0; x.len()];
        self.evaluate_into(t, x, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cubic_drift(x: &[f64], out: &mut [f64]) {
        out[0] = -x[0] * x[0] * x[0];
    }

    /// Frozen-Lorenz drift with n = 1, b = 1, c = 0.5.
    fn frozen_lorenz(x: &[f64], out: &mut [f64]) {
        let (b, c) = (1.0, 0.5);
        out[0] = -x[0].powi(3) + c * x[0] - b * c * x[1];
        out[1] = -x[1].powi(3) + b * c * x[0] + c * x[1];
    }

    #[test]
    fn cubic_flow_values() {
        assert_eq!(cubic_flow(0.0, 5.0), 5.0);
        assert_eq!(cubic_flow(3.0, 0.0), 0.0);
        assert_relative_eq!(cubic_flow(0.5, 1.0), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert!((cubic_flow(0.01, 1e9) - 1.0 / 0.02f64.sqrt()).abs() < 1e-12);
        assert!(cubic_flow(0.01, f64::MAX).is_finite());
    }

    #[test]
    fn cubic_bound_survives_rounding() {
        for t in [0.1, 1.0, 2.0, 5.0] {
            let k = cubic_return_radius(t);
            for i in 0..20_000 {
                let x = 10f64.powf(5.0 + 3.0 * i as f64 / 20_000.0);
                assert!(cubic_flow(t, x) <= k && cubic_flow(t, -x) >= -k, "t = {t}, x = {x}");
            }
        }
    }

    #[test]
    fn cubic_branches_agree_at_switch() {
        for h in [1e-1, 1e-3, 1e-5] {
            let x = CUBIC_LARGE_X;
            let direct = x / (2.0 * h * x * x + 1.0).sqrt();
            let reciprocal = 1.0 / (2.0 * h + 1.0 / (x * x)).sqrt();
            assert_relative_eq!(direct, reciprocal, max_relative = 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn radial_flow_values() {
        let r = radial_poly_flow(0.5, &[1.0], 1);
        assert_relative_eq!(r[0], cubic_flow(0.5, 1.0), max_relative = 1e-15);
        assert_eq!(radial_poly_flow(2.0, &[0.0, 0.0, 0.0], 3), vec![0.0; 3]);
        let x = [0.6, 0.8];
        let y = radial_poly_flow(1.0, &x, 2);
        assert_relative_eq!(norm(&y), 5f64.powf(-0.25), epsilon = 1e-12);
        assert_relative_eq!(y[0] / y[1], 0.75, epsilon = 1e-14);
        let big = radial_poly_flow(0.1, &[1e200, -1e200], 2);
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn radial_flow_matches_rk4_oracle() {
        let x = [0.6, 0.8];
        let drift = |x: &[f64], out: &mut [f64]| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = -r2 * r2 * x[0];
            out[1] = -r2 * r2 * x[1];
        };
        let numeric = rk4_flow(1.0, &x, &drift, 1e-12, DEFAULT_MAX_SUBSTEPS).unwrap();
        let exact = radial_poly_flow(1.0, &x, 2);
        for i in 0..2 {
            assert!((numeric[i] - exact[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn rk4_matches_cubic() {
        let y = rk4_flow(0.05, &[3.0], &cubic_drift, 1e-10, DEFAULT_MAX_SUBSTEPS).unwrap();
        assert!((y[0] - cubic_flow(0.05, 3.0)).abs() < 1e-8);
        assert_eq!(rk4_flow(0.0, &[3.0, 1.0], &cubic_drift, 1e-10, 10).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn rk4_frozen_lorenz_vs_fixed_step_reference() {
        // Fixed-step RK4 with 10^6 substeps, computed once offline.
        const REFERENCE: [f64; 2] = [1.9384877458866185, -0.9853390879919288];
        let y = rk4_flow(0.01, &[2.0, -1.0], &frozen_lorenz, 1e-10, DEFAULT_MAX_SUBSTEPS).unwrap();
        for i in 0..2 {
            assert!((y[i] - REFERENCE[i]).abs() < 1e-8, "{y:?}");
        }
    }

    #[test]
    fn rk4_reports_divergence() {
        let err = rk4_flow(1.0, &[50.0], &cubic_drift, 1e-10, 8).unwrap_err();
        assert!(matches!(err, FlowError::Divergence { .. }));
        assert!(rk4_flow(-1.0, &[1.0], &cubic_drift, 1e-10, 8).is_err());
    }

    #[test]
    fn numeric_flow_map_respects_bound() {
        let flow = FlowMap::numeric(Arc::new(frozen_lorenz), 0.5, 0.0);
        let x = [40.0, -25.0];
        let y = flow.evaluate(0.01, &x).unwrap();
        assert!(norm(&y) <= flow.norm_bound(0.01, norm(&x)));
    }

    #[test]
    fn rk4_semigroup() {
        let tol = 1e-10;
        let x = [1.7];
        let a = rk4_flow(0.03, &x, &cubic_drift, tol, DEFAULT_MAX_SUBSTEPS).unwrap();
        let ab = rk4_flow(0.04, &a, &cubic_drift, tol, DEFAULT_MAX_SUBSTEPS).unwrap();
        let direct = rk4_flow(0.07, &x, &cubic_drift, tol, DEFAULT_MAX_SUBSTEPS).unwrap();
        assert!((ab[0] - direct[0]).abs() <= 10.0 * tol);
    }

    proptest! {
        #[test]
        fn cubic_semigroup(s in 0.0f64..10.0, t in 0.0f64..10.0, x in -1e6f64..1e6) {
            let lhs = cubic_flow(s, cubic_flow(t, x));
            let rhs = cubic_flow(s + t, x);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(f64::MIN_POSITIVE));
        }

        #[test]
        fn cubic_contracts_and_is_bounded(t in 1e-6f64..10.0, x in -1e12f64..1e12) {
            let y = cubic_flow(t, x);
            prop_assert!(y.abs() <= x.abs());
            prop_assert!(y.abs() <= cubic_return_radius(t));
            // displacement bound at L = 0: |Phi - x| <= t |A(x)|
            prop_assert!((y - x).abs() <= t * x.abs().powi(3) * (1.0 + 1e-12));
        }

        #[test]
        fn cubic_is_monotone(t in 0.0f64..5.0, x in -1e9f64..1e9, dx in 0.0f64..1e3) {
            // exact map is monotone; the rounded one may wobble by a few ulps
            let (a, b) = (cubic_flow(t, x), cubic_flow(t, x + dx));
            prop_assert!(a <= b + 4.0 * f64::EPSILON * a.abs().max(b.abs()));
        }

        #[test]
        fn radial_contracts_and_keeps_direction(
            t in 0.0f64..5.0,
            n in 1u32..4,
            x in proptest::collection::vec(-50.0f64..50.0, 1..4),
        ) {
            let y = radial_poly_flow(t, &x, n);
            prop_assert!(norm(&y) <= norm(&x) * (1.0 + 1e-15));
            let r = norm(&x);
            if r > 0.0 {
                let s = norm(&y);
                for (a, b) in x.iter().zip(&y) {
                    prop_assert!((a / r - b / s).abs() < 1e-12);
                }
                // displacement bound at L = 0
                let ax = r.powi(2 * n as i32 + 1);
                let disp = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
                prop_assert!(disp <= t * ax * (1.0 + 1e-12) + 1e-300);
            }
        }

        #[test]
        fn radial_semigroup(s in 0.0f64..3.0, t in 0.0f64..3.0, n in 1u32..4, a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let x = [a, b];
            let lhs = radial_poly_flow(s, &radial_poly_flow(t, &x, n), n);
            let rhs = radial_poly_flow(s + t, &x, n);
            for i in 0..2 {
                prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-12 * norm(&rhs).max(f64::MIN_POSITIVE));
            }
        }
    }
}
