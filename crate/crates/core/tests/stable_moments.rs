//! Fractional moments of the stable samplers against closed forms.
//!
//! For a symmetric stable variable with characteristic function
//! exp(-|u|^alpha) and 0 < p < alpha,
//! E|S|^p = Gamma(1 - p/alpha) / (Gamma(1 - p) cos(pi p / 2)).

use levysplit::noise::{cauchy_increments, stable_increments, Channel, StreamKey};

const SAMPLES: usize = 200_000;

fn mean_abs_pow(draws: &[Vec<f64>], p: f64) -> (f64, f64) {
    let vals: Vec<f64> = draws.iter().map(|v| v[0].abs().powf(p)).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var / n).sqrt())
}

#[test]
fn stable_alpha_1_5_half_moment() {
    // Gamma(2/3) / (Gamma(1/2) cos(pi/4))
    let exact = 1.080_429_797_374_514_5;
    let key = StreamKey::new(7, 0, 0, Channel::Levy);
    let draws = stable_increments(key, 1.5, 1, 1.0, SAMPLES).unwrap();
    let (m, se) = mean_abs_pow(&draws, 0.5);
    assert!((m - exact).abs() < 5.0 * se, "{m} vs {exact} (se {se})");
}

#[test]
fn stable_scales_with_step() {
    // S_h has the law of h^{1/alpha} S_1, so E|S_h|^p = h^{p/alpha} E|S_1|^p
    let h: f64 = 0.01;
    let exact = 1.080_429_797_374_514_5 * h.powf(0.5 / 1.5);
    let key = StreamKey::new(8, 0, 0, Channel::Levy);
    let draws = stable_increments(key, 1.5, 1, h, SAMPLES).unwrap();
    let (m, se) = mean_abs_pow(&draws, 0.5);
    assert!((m - exact).abs() < 5.0 * se, "{m} vs {exact} (se {se})");
}

#[test]
fn cauchy_half_moment() {
    let exact = std::f64::consts::SQRT_2;
    let key = StreamKey::new(9, 0, 0, Channel::Levy);
    let draws = cauchy_increments(key, 1, 1.0, SAMPLES).unwrap();
    let (m, se) = mean_abs_pow(&draws, 0.5);
    assert!((m - exact).abs() < 5.0 * se, "{m} vs {exact} (se {se})");
}

#[test]
fn stable_alpha_one_matches_cauchy_law() {
    let key = StreamKey::new(10, 0, 0, Channel::Levy);
    let draws = stable_increments(key, 1.0, 1, 1.0, SAMPLES).unwrap();
    let (m, se) = mean_abs_pow(&draws, 0.5);
    let exact = std::f64::consts::SQRT_2;
    assert!((m - exact).abs() < 5.0 * se, "{m} vs {exact} (se {se})");
}
