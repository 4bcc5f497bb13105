//! Reproducible Brownian and Lévy increments on uniform time grids.
//!
//! Every random draw is addressed by a [`StreamKey`]: the master seed, the
//! path index, the step index and the channel. The key is hashed into the
//! seed of a short-lived xoshiro256++ stream, and successive draws from that
//! stream are the "lanes" of the key. Two workers that ask for the same key
//! therefore see bit-identical numbers, no matter which order paths are
//! simulated in.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp1, Normal, Pareto, Poisson, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, NoiseError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(NoiseError::InvalidArgument(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Brownian,
    Levy,
}

/// Address of one block of random draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub path_index: u64,
    pub step_index: u64,
    pub channel: Channel,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

// SplitMix64 output function.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(master_seed: u64, path_index: u64, step_index: u64, channel: Channel) -> Self {
        Self {
            master_seed,
            path_index,
            step_index,
            channel,
        }
    }

    pub fn with_step(self, step_index: u64) -> Self {
        Self { step_index, ..self }
    }

    /// 64-bit digest of the key. Each field is absorbed through a full
    /// SplitMix64 round so that neighbouring counters decorrelate.
    pub fn digest(&self) -> u64 {
        let channel = match self.channel {
            Channel::Brownian => 0x42u64,
            Channel::Levy => 0x4cu64,
        };
        let mut s = mix64(self.master_seed.wrapping_add(GOLDEN_GAMMA));
        for word in [self.path_index, self.step_index, channel] {
            s = mix64(s.wrapping_add(GOLDEN_GAMMA) ^ mix64(word.wrapping_add(GOLDEN_GAMMA)));
        }
        s
    }

    /// Lane stream for this key. Lane `j` is the `j`-th draw.
    pub fn stream(&self) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.digest())
    }
}

/// Jump-size laws available to the compound Poisson driver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "snake_case")]
pub enum JumpSampler {
    /// Symmetric Pareto jumps `±P` with `P(P > r) = r^{-index}` for `r ≥ 1`.
    /// Moments of order `p < index` are finite.
    SymmetricPareto { index: f64 },
    /// Centred Gaussian jumps.
    Normal { std: f64 },
}

impl JumpSampler {
    fn validate(&self) -> Result<()> {
        match *self {
            JumpSampler::SymmetricPareto { index } if !(index > 0.0 && index.is_finite()) => {
                invalid(format!("pareto index must be positive, got {index}"))
            }
            JumpSampler::Normal { std } if !(std > 0.0 && std.is_finite()) => {
                invalid(format!("normal jump std must be positive, got {std}"))
            }
            _ => Ok(()),
        }
    }

    /// Supremum of admissible moment orders (`+inf` when all moments exist).
    pub fn moment_bound(&self) -> f64 {
        match *self {
            JumpSampler::SymmetricPareto { index } => index,
            JumpSampler::Normal { .. } => f64::INFINITY,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            JumpSampler::SymmetricPareto { index } => {
                let size: f64 = Pareto::new(1.0, index).unwrap().sample(rng);
                if rng.random::<bool>() {
                    size
                } else {
                    -size
                }
            }
            JumpSampler::Normal { std } => Normal::new(0.0, std).unwrap().sample(rng),
        }
    }
}

/// Registry lookup: `pareto:<index>` or `normal:<std>`.
impl FromStr for JumpSampler {
    type Err = NoiseError;

    fn from_str(id: &str) -> Result<Self> {
        let (name, arg) = id
            .split_once(':')
            .ok_or_else(|| NoiseError::InvalidArgument(format!("malformed jump sampler id `{id}`")))?;
        let value: f64 = arg
            .trim()
            .parse()
            .map_err(|_| NoiseError::InvalidArgument(format!("bad parameter in `{id}`")))?;
        let sampler = match name.trim() {
            "pareto" => JumpSampler::SymmetricPareto { index: value },
            "normal" => JumpSampler::Normal { std: value },
            other => return invalid(format!("unknown jump sampler `{other}`")),
        };
        sampler.validate()?;
        Ok(sampler)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevyKind {
    None,
    Cauchy,
    SymmetricAlphaStable { alpha: f64 },
    CompoundPoisson { rate: f64, jump: JumpSampler },
}

/// Driving noise of an SDE: Brownian dimension, Lévy law and dimension, and
/// the moment order `p` the Lévy measure is known to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub brownian_dim: usize,
    pub levy: LevyKind,
    pub levy_dim: usize,
    pub p_moment: f64,
}

impl NoiseSpec {
    pub fn brownian(dim: usize) -> Self {
        Self {
            brownian_dim: dim,
            levy: LevyKind::None,
            levy_dim: 0,
            p_moment: f64::INFINITY,
        }
    }

    pub fn cauchy(dim: usize, p_moment: f64) -> Self {
        Self {
            brownian_dim: 0,
            levy: LevyKind::Cauchy,
            levy_dim: dim,
            p_moment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.brownian_dim + self.levy_dim == 0 {
            return invalid("noise has neither a Brownian nor a Levy component");
        }
        if !(self.p_moment > 0.0) {
            return invalid(format!("p_moment must be positive, got {}", self.p_moment));
        }
        match self.levy {
            LevyKind::None => {
                if self.levy_dim != 0 {
                    return invalid("levy_dim must be 0 when the Levy kind is none");
                }
            }
            LevyKind::Cauchy => {
                if self.p_moment >= 1.0 {
                    return invalid(format!(
                        "Cauchy noise only integrates moments p < 1, got {}",
                        self.p_moment
                    ));
                }
            }
            LevyKind::SymmetricAlphaStable { alpha } => {
                check_alpha(alpha)?;
                if self.p_moment >= alpha {
                    return invalid(format!(
                        "alpha-stable noise only integrates moments p < alpha = {alpha}, got {}",
                        self.p_moment
                    ));
                }
            }
            LevyKind::CompoundPoisson { rate, jump } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return invalid(format!("compound Poisson rate must be positive, got {rate}"));
                }
                jump.validate()?;
                if self.p_moment >= jump.moment_bound() {
                    return invalid(format!(
                        "jump law only integrates moments p < {}, got {}",
                        jump.moment_bound(),
                        self.p_moment
                    ));
                }
            }
        }
        if self.levy != LevyKind::None && self.levy_dim == 0 {
            return invalid("a Levy kind was given but levy_dim is 0");
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        invalid(format!("stability index must lie in (0, 2), got {alpha}"))
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        invalid(format!("step size must be positive and finite, got {h}"))
    }
}

#[inline]
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

/// Standard Cauchy variate by inversion.
#[inline]
fn standard_cauchy<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (PI * (open_uniform(rng) - 0.5)).tan()
}

/// Standard symmetric alpha-stable variate (characteristic function
/// `exp(-|t|^alpha)`) by the Chambers–Mallows–Stuck transform.
fn standard_symmetric_stable<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> f64 {
    loop {
        let v = PI * (open_uniform(rng) - 0.5);
        let w: f64 = Exp1.sample(rng);
        let x = if alpha == 1.0 {
            v.tan()
        } else {
            let head = (alpha * v).sin() / v.cos().powf(1.0 / alpha);
            let tail = (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha);
            head * tail
        };
        // Only reachable for extreme alpha with U adjacent to an endpoint.
        if x.is_finite() {
            return x;
        }
    }
}

/// Per-step increment sampler for one [`NoiseSpec`] at a fixed step size.
#[derive(Clone, Debug)]
pub struct NoiseGenerator {
    spec: NoiseSpec,
    master_seed: u64,
    h: f64,
    sqrt_h: f64,
    stable_scale: f64,
    poisson: Option<Poisson<f64>>,
}

impl NoiseGenerator {
    pub fn new(spec: NoiseSpec, master_seed: u64, h: f64) -> Result<Self> {
        spec.validate()?;
        check_step(h)?;
        let stable_scale = match spec.levy {
            LevyKind::SymmetricAlphaStable { alpha } => h.powf(1.0 / alpha),
            _ => h,
        };
        let poisson = match spec.levy {
            LevyKind::CompoundPoisson { rate, .. } => Some(
                Poisson::new(rate * h)
                    .map_err(|e| NoiseError::InvalidArgument(format!("poisson intensity: {e}")))?,
            ),
            _ => None,
        };
        Ok(Self {
            spec,
            master_seed,
            h,
            sqrt_h: h.sqrt(),
            stable_scale,
            poisson,
        })
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Writes the increments of step `step` of path `path`.
    pub fn fill_step(&self, path: u64, step: u64, db: &mut [f64], dz: &mut [f64]) {
        debug_assert_eq!(db.len(), self.spec.brownian_dim);
        debug_assert_eq!(dz.len(), self.spec.levy_dim);
        if !db.is_empty() {
            let mut rng = StreamKey::new(self.master_seed, path, step, Channel::Brownian).stream();
            for v in db.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = self.sqrt_h * g;
            }
        }
        if !dz.is_empty() {
            let mut rng = StreamKey::new(self.master_seed, path, step, Channel::Levy).stream();
            self.fill_levy(&mut rng, dz);
        }
    }

    fn fill_levy<R: Rng>(&self, rng: &mut R, dz: &mut [f64]) {
        match self.spec.levy {
            LevyKind::None => dz.fill(0.0),
            LevyKind::Cauchy => {
                for v in dz.iter_mut() {
                    *v = self.h * standard_cauchy(rng);
                }
            }
            LevyKind::SymmetricAlphaStable { alpha } => {
                for v in dz.iter_mut() {
                    *v = self.stable_scale * standard_symmetric_stable(rng, alpha);
                }
            }
            LevyKind::CompoundPoisson { jump, .. } => {
                let poisson = self.poisson.as_ref().expect("poisson law set in constructor");
                for v in dz.iter_mut() {
                    let count = poisson.sample(rng) as u64;
                    let mut acc = 0.0;
                    for _ in 0..count {
                        acc += jump.sample(rng);
                    }
                    *v = acc;
                }
            }
        }
    }
}

fn keyed_vectors<F>(key: StreamKey, dim: usize, count: usize, mut draw: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Xoshiro256PlusPlus) -> f64,
{
    if count == 0 {
        return invalid("count must be at least 1");
    }
    Ok((0..count as u64)
        .map(|i| {
            let mut rng = key.with_step(key.step_index + i).stream();
            (0..dim).map(|_| draw(&mut rng)).collect()
        })
        .collect())
}

/// `count` i.i.d. `N(0, h Id)` vectors; vector `i` is drawn from `key` with
/// its step index advanced by `i`.
pub fn brownian_increments(key: StreamKey, dim: usize, h: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    check_step(h)?;
    let sqrt_h = h.sqrt();
    keyed_vectors(key, dim, count, |rng| {
        let g: f64 = StandardNormal.sample(rng);
        sqrt_h * g
    })
}

/// Increments of a standard Cauchy process over time `h`, i.e. Cauchy
/// variates of scale `h`.
pub fn cauchy_increments(key: StreamKey, dim: usize, h: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    check_step(h)?;
    keyed_vectors(key, dim, count, |rng| h * standard_cauchy(rng))
}

/// Increments of a symmetric alpha-stable process over time `h` (scale
/// `h^{1/alpha}`). `alpha = 2` is rejected; use [`brownian_increments`].
pub fn stable_increments(
    key: StreamKey,
    alpha: f64,
    dim: usize,
    h: f64,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    check_alpha(alpha)?;
    check_step(h)?;
    let scale = h.powf(1.0 / alpha);
    keyed_vectors(key, dim, count, |rng| scale * standard_symmetric_stable(rng, alpha))
}

/// Brownian and Lévy increments of one path on a uniform grid, stored
/// row-major (`n_steps` rows).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid {
    n_steps: usize,
    h: f64,
    brownian_dim: usize,
    levy_dim: usize,
    db: Vec<f64>,
    dz: Vec<f64>,
}

impl NoiseGrid {
    pub fn zeros(n_steps: usize, h: f64, brownian_dim: usize, levy_dim: usize) -> Result<Self> {
        check_step(h)?;
        if n_steps == 0 {
            return invalid("a noise grid needs at least one step");
        }
        Ok(Self {
            n_steps,
            h,
            brownian_dim,
            levy_dim,
            db: vec![0.0; n_steps * brownian_dim],
            dz: vec![0.0; n_steps * levy_dim],
        })
    }

    /// Builds a grid from explicit per-step rows.
    pub fn from_rows(h: f64, db: &[Vec<f64>], dz: &[Vec<f64>]) -> Result<Self> {
        let n_steps = db.len().max(dz.len());
        let brownian_dim = db.first().map_or(0, Vec::len);
        let levy_dim = dz.first().map_or(0, Vec::len);
        if (!db.is_empty() && db.len() != n_steps) || (!dz.is_empty() && dz.len() != n_steps) {
            return invalid("Brownian and Levy rows disagree on the number of steps");
        }
        if db.iter().any(|r| r.len() != brownian_dim) || dz.iter().any(|r| r.len() != levy_dim) {
            return invalid("ragged increment rows");
        }
        let mut grid = Self::zeros(n_steps, h, brownian_dim, levy_dim)?;
        grid.db = db.concat();
        grid.dz = dz.concat();
        if grid.db.len() != n_steps * brownian_dim {
            grid.db = vec![0.0; n_steps * brownian_dim];
        }
        if grid.dz.len() != n_steps * levy_dim {
            grid.dz = vec![0.0; n_steps * levy_dim];
        }
        Ok(grid)
    }

    /// Draws path `path` from `generator` over `n_steps` steps.
    pub fn generate(generator: &NoiseGenerator, path: u64, n_steps: usize) -> Result<Self> {
        let spec = generator.spec();
        let mut grid = Self::zeros(n_steps, generator.h(), spec.brownian_dim, spec.levy_dim)?;
        grid.refill(generator, path);
        Ok(grid)
    }

    /// Overwrites this grid in place with path `path` from `generator`.
    pub fn refill(&mut self, generator: &NoiseGenerator, path: u64) {
        let (bd, ld) = (self.brownian_dim, self.levy_dim);
        for k in 0..self.n_steps {
            generator.fill_step(
                path,
                k as u64,
                &mut self.db[k * bd..(k + 1) * bd],
                &mut self.dz[k * ld..(k + 1) * ld],
            );
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    pub fn levy_dim(&self) -> usize {
        self.levy_dim
    }

    pub fn db(&self, k: usize) -> &[f64] {
        &self.db[k * self.brownian_dim..(k + 1) * self.brownian_dim]
    }

    pub fn dz(&self, k: usize) -> &[f64] {
        &self.dz[k * self.levy_dim..(k + 1) * self.levy_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.db.iter().chain(&self.dz).all(|v| v.is_finite())
    }
}

/// Balanced pairwise sum of `block[j * dim + i]` over `j in lo..hi`. For
/// power-of-two ratios the tree of a nested aggregation is a subtree of the
/// direct one, so repeated aggregation reproduces it bit for bit.
fn pairwise(block: &[f64], dim: usize, i: usize, lo: usize, hi: usize) -> f64 {
    if hi - lo == 1 {
        return block[lo * dim + i];
    }
    let mid = lo + (hi - lo) / 2;
    pairwise(block, dim, i, lo, mid) + pairwise(block, dim, i, mid, hi)
}

fn sum_blocks(fine: &[f64], dim: usize, ratio: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    fine.chunks_exact(dim * ratio)
        .flat_map(|block| (0..dim).map(move |i| pairwise(block, dim, i, 0, ratio)))
        .collect()
}

/// Sums consecutive blocks of `ratio` fine increments into one coarse
/// increment with a fixed pairwise tree.
pub fn aggregate_to_coarse(fine: &NoiseGrid, ratio: usize) -> Result<NoiseGrid> {
    if ratio == 0 {
        return invalid("aggregation ratio must be positive");
    }
    if !fine.n_steps.is_multiple_of(ratio) {
        return invalid(format!(
            "{} fine steps are not divisible by ratio {ratio}",
            fine.n_steps
        ));
    }
    if ratio == 1 {
        return Ok(fine.clone());
    }
    Ok(NoiseGrid {
        n_steps: fine.n_steps / ratio,
        h: fine.h * ratio as f64,
        brownian_dim: fine.brownian_dim,
        levy_dim: fine.levy_dim,
        db: sum_blocks(&fine.db, fine.brownian_dim, ratio),
        dz: sum_blocks(&fine.dz, fine.levy_dim, ratio),
    })
}
