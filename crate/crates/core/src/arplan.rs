//! Autoregressive step plans: an ordered partition of the gene-token
//! sequence into groups, with the number of groups biased toward small
//! values by an exponential decay.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_AR_DECAY: f64 = 0.8;

/// Split sizes `sz` and cumulative boundaries `cs = [0, …, S]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ARStepPlan {
    sz: Vec<usize>,
    cs: Vec<usize>,
}

impl ARStepPlan {
    pub fn from_sizes(sz: &[usize]) -> Result<Self> {
        if sz.is_empty() || sz.contains(&0) {
            return Err(Error::invalid(format!(
                "split sizes {sz:?} must be nonempty and positive"
            )));
        }
        let mut cs = Vec::with_capacity(sz.len() + 1);
        cs.push(0);
        let mut acc = 0;
        for &s in sz {
            acc += s;
            cs.push(acc);
        }
        Ok(ARStepPlan {
            sz: sz.to_vec(),
            cs,
        })
    }

    /// Plan from interior cut points in `[1, s)`; they need not be sorted
    /// but must be distinct.
    pub fn from_cuts(s: usize, cuts: &[usize]) -> Result<Self> {
        if s == 0 {
            return Err(Error::invalid("sample length must be positive"));
        }
        let mut sorted = cuts.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != cuts.len() || sorted.iter().any(|&c| c == 0 || c >= s) {
            return Err(Error::invalid(format!(
                "cut points {cuts:?} must be distinct and inside [1, {s})"
            )));
        }
        let mut cs = Vec::with_capacity(cuts.len() + 2);
        cs.push(0);
        cs.extend(sorted);
        cs.push(s);
        let sz = cs.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(ARStepPlan { sz, cs })
    }

    /// `k` contiguous groups whose widths differ by at most one (earlier
    /// groups take the remainder). `k` is clamped to `[1, s]`.
    pub fn equal_groups(s: usize, k: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::invalid("sample length must be positive"));
        }
        let k = k.clamp(1, s);
        let sz: Vec<usize> = (0..k).map(|i| s / k + usize::from(i < s % k)).collect();
        Self::from_sizes(&sz)
    }

    /// Number of gene tokens.
    pub fn len(&self) -> usize {
        *self.cs.last().expect("cs is never empty")
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of AR steps.
    pub fn n_steps(&self) -> usize {
        self.sz.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sz
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.cs
    }

    /// Token index range of step `i`.
    pub fn step_range(&self, i: usize) -> std::ops::Range<usize> {
        self.cs[i]..self.cs[i + 1]
    }

    /// AR step containing token `k`.
    pub fn step_of(&self, k: usize) -> usize {
        self.cs.partition_point(|&b| b <= k) - 1
    }

    /// Tokens with clean copies: every step but the last.
    pub fn visible_len(&self) -> usize {
        self.len() - self.sz.last().copied().unwrap_or(0)
    }
}

impl fmt::Display for ARStepPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sz=")?;
        for (i, s) in self.sz.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for ARStepPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim();
        let body = body.strip_prefix("sz=").unwrap_or(body);
        let sizes = body
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad split size {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_sizes(&sizes)
    }
}

/// `P(N = i + 1) = b·α^i` for `i in 0..s`, `b = (1 − α)/(1 − α^s)`.
/// Uniform when `α = 1`.
pub fn step_count_probabilities(s: usize, alpha: f64) -> Vec<f64> {
    if alpha == 1.0 {
        return vec![1.0 / s as f64; s];
    }
    let b = (1.0 - alpha) / (1.0 - alpha.powi(s as i32));
    (0..s).map(|i| b * alpha.powi(i as i32)).collect()
}

/// Draws a random plan over `s` tokens with decay `alpha ∈ (0, 1]`.
pub fn generate_ar_steps<R: Rng + ?Sized>(s: usize, alpha: f64, rng: &mut R) -> Result<ARStepPlan> {
    if s == 0 {
        return Err(Error::invalid("sample length must be positive"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("AR decay {alpha} outside (0, 1]")));
    }
    let n = if alpha == 1.0 {
        rng.random_range(1..=s)
    } else {
        let probs = step_count_probabilities(s, alpha);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut n = s;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                n = i + 1;
                break;
            }
        }
        n
    };
    // Partial Fisher-Yates over the candidate cut points 1..s.
    let mut pool: Vec<usize> = (1..s).collect();
    for i in 0..n - 1 {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    ARStepPlan::from_cuts(s, &pool[..n - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example_boundaries() {
        let p = ARStepPlan::from_cuts(7, &[4, 2]).unwrap();
        assert_eq!(p.sizes(), &[2, 2, 3]);
        assert_eq!(p.boundaries(), &[0, 2, 4, 7]);
        assert_eq!(p.visible_len(), 4);
        assert_eq!(p.to_string(), "sz=2,2,3");
        assert_eq!("sz=2,2,3".parse::<ARStepPlan>().unwrap(), p);
        assert_eq!(p.step_of(0), 0);
        assert_eq!(p.step_of(3), 1);
        assert_eq!(p.step_of(6), 2);
    }

    #[test]
    fn single_token_forces_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for alpha in [0.3, 0.8, 1.0] {
            let p = generate_ar_steps(1, alpha, &mut rng).unwrap();
            assert_eq!(p.sizes(), &[1]);
            assert_eq!(p.boundaries(), &[0, 1]);
        }
        assert!(generate_ar_steps(0, 0.8, &mut rng).is_err());
        assert!(generate_ar_steps(5, 0.0, &mut rng).is_err());
        assert!(generate_ar_steps(5, 1.2, &mut rng).is_err());
    }

    #[test]
    fn probabilities_normalize() {
        for s in [1, 2, 7, 64] {
            for alpha in [0.5, 0.7, 0.8, 0.9, 0.99, 1.0] {
                let total: f64 = step_count_probabilities(s, alpha).iter().sum();
                assert!((total - 1.0).abs() < 1e-12, "s={s} alpha={alpha}");
            }
        }
    }

    #[test]
    fn step_count_ratio_follows_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 11];
        for _ in 0..100_000 {
            counts[generate_ar_steps(10, 0.8, &mut rng).unwrap().n_steps()] += 1;
        }
        let ratio = counts[1] as f64 / counts[2] as f64;
        assert!((ratio - 1.25).abs() / 1.25 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn mean_step_count_decreases_with_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = |alpha: f64, rng: &mut ChaCha8Rng| -> f64 {
            (0..20_000)
                .map(|_| generate_ar_steps(16, alpha, rng).unwrap().n_steps() as f64)
                .sum::<f64>()
                / 20_000.0
        };
        let grid = [1.0, 0.9, 0.7, 0.5, 0.2, 0.01];
        let means: Vec<f64> = grid.iter().map(|&a| mean(a, &mut rng)).collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
        assert!(means.last().unwrap() - 1.0 < 0.02);
    }

    #[test]
    fn equal_groups_widths() {
        assert_eq!(ARStepPlan::equal_groups(7, 3).unwrap().sizes(), &[3, 2, 2]);
        assert_eq!(ARStepPlan::equal_groups(4, 1).unwrap().sizes(), &[4]);
        assert_eq!(ARStepPlan::equal_groups(2, 9).unwrap().sizes(), &[1, 1]);
    }

    #[test]
    fn invalid_plans() {
        assert!(ARStepPlan::from_sizes(&[]).is_err());
        assert!(ARStepPlan::from_sizes(&[2, 0]).is_err());
        assert!(ARStepPlan::from_cuts(5, &[2, 2]).is_err());
        assert!(ARStepPlan::from_cuts(5, &[5]).is_err());
        assert!("sz=1,x".parse::<ARStepPlan>().is_err());
    }
}
