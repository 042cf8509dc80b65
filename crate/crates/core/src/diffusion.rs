//! Variance schedules, closed-form forward noising and timestep sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_T: usize = 2000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

/// `β_1..β_T` with `α_t = 1 − β_t` and `ᾱ_t = ∏_{s≤t} α_s`.
///
/// Timesteps are 1-based everywhere in the public API.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> DiffusionSchedule<T> {
    /// Linear interpolation from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start ({beta_start}) < beta_end ({beta_end}) < 1"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::build(betas))
    }

    /// Arbitrary nondecreasing betas in `[0, 1)`. Zero betas are allowed so
    /// that noiseless limit schedules can be expressed.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("betas must be nondecreasing"));
        }
        Ok(Self::build(betas.to_vec()))
    }

    fn build(betas: Vec<f64>) -> Self {
        // Kahan-compensated sum of ln(1 - β) keeps ᾱ accurate over long chains.
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        let mut alpha_bars = Vec::with_capacity(betas.len());
        for &b in &betas {
            let y = (-b).ln_1p() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            alpha_bars.push(T::of(sum.exp()));
        }
        DiffusionSchedule {
            alphas: betas.iter().map(|&b| T::of(1.0 - b)).collect(),
            betas: betas.into_iter().map(T::of).collect(),
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> T {
        let ab = self.alpha_bar(t);
        ab / (T::one() - ab)
    }
}

/// Closed-form `x_t = √ᾱ_t · x_0 + √(1 − ᾱ_t) · ε`.
pub fn forward_sample<T: Scalar>(
    x0: &[T],
    t: usize,
    schedule: &DiffusionSchedule<T>,
    eps: &[T],
) -> Result<Vec<T>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("x0 and noise lengths differ"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// One Markov transition `x_t = √(1 − β_t) · x_{t−1} + √β_t · z`.
pub fn forward_step<T: Scalar>(
    x_prev: &[T],
    t: usize,
    schedule: &DiffusionSchedule<T>,
    z: &[T],
) -> Result<Vec<T>> {
    schedule.check_t(t)?;
    let b = schedule.beta(t);
    let (a, s) = ((T::one() - b).sqrt(), b.sqrt());
    Ok(x_prev.iter().zip(z).map(|(&x, &n)| a * x + s * n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// Every timestep in `1..=T`.
    Full,
    /// `⌊T/n⌋` timesteps spaced `n` apart, anchored at `T`.
    Fractional(usize),
    /// Uniform timesteps, with AR step `s` receiving a share of the draws
    /// proportional to `decay^s`.
    Adaptive,
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::Full => f.write_str("full"),
            SamplingStrategy::Fractional(n) => write!(f, "frac:{n}"),
            SamplingStrategy::Adaptive => f.write_str("adaptive"),
        }
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(SamplingStrategy::Full),
            "adaptive" => Ok(SamplingStrategy::Adaptive),
            other => {
                let n = other
                    .strip_prefix("frac:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "sampling strategy {other:?} is not full, frac:<n> or adaptive"
                        ))
                    })?;
                Ok(SamplingStrategy::Fractional(n))
            }
        }
    }
}

/// Ascending candidate timesteps for a strategy. Adaptive draws from the
/// full range.
pub fn candidate_timesteps(steps: usize, strategy: SamplingStrategy) -> Result<Vec<usize>> {
    match strategy {
        SamplingStrategy::Full | SamplingStrategy::Adaptive => Ok((1..=steps).collect()),
        SamplingStrategy::Fractional(n) => {
            if n == 0 || n > steps {
                return Err(Error::invalid(format!(
                    "fractional sampling 1/{n} needs 1 <= n <= T = {steps}"
                )));
            }
            let count = steps / n;
            Ok((0..count).map(|k| steps - n * (count - 1 - k)).collect())
        }
    }
}

/// Sampled timesteps, one multiset per AR step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepPlan {
    pub strategy: SamplingStrategy,
    pub per_ar_step: Vec<Vec<usize>>,
}

/// Draws `draws_per_step` timesteps for each AR step (full / fractional), or
/// `draws_per_step · n_ar_steps` draws allocated across steps with weights
/// `decay^s` (adaptive). An adaptive step left empty by the allocation gets a
/// single draw so every step has a noise level.
pub fn sample_timesteps<T: Scalar, R: Rng + ?Sized>(
    schedule: &DiffusionSchedule<T>,
    strategy: SamplingStrategy,
    n_ar_steps: usize,
    draws_per_step: usize,
    decay: f64,
    rng: &mut R,
) -> Result<TimestepPlan> {
    if n_ar_steps == 0 {
        return Err(Error::invalid("need at least one AR step"));
    }
    let candidates = candidate_timesteps(schedule.steps(), strategy)?;
    let pick = |rng: &mut R| candidates[rng.random_range(0..candidates.len())];
    let mut per_ar_step = vec![Vec::new(); n_ar_steps];
    match strategy {
        SamplingStrategy::Full | SamplingStrategy::Fractional(_) => {
            for step in per_ar_step.iter_mut() {
                for _ in 0..draws_per_step {
                    step.push(pick(rng));
                }
            }
        }
        SamplingStrategy::Adaptive => {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::invalid(format!("decay {decay} outside (0, 1]")));
            }
            let weights: Vec<f64> = (0..n_ar_steps).map(|s| decay.powi(s as i32)).collect();
            let total: f64 = weights.iter().sum();
            for _ in 0..draws_per_step * n_ar_steps {
                let mut u = rng.random::<f64>() * total;
                let mut s = n_ar_steps - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        s = i;
                        break;
                    }
                    u -= w;
                }
                per_ar_step[s].push(pick(rng));
            }
            for step in per_ar_step.iter_mut().filter(|s| s.is_empty()) {
                step.push(pick(rng));
            }
        }
    }
    Ok(TimestepPlan {
        strategy,
        per_ar_step,
    })
}
