//! Pairwise Granger-causality F-tests over gene expression profiles, with
//! the observation (column) order taken as the sequence order.

use rayon::prelude::*;

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::special::f_survival;

#[derive(Clone, Debug, PartialEq)]
pub struct GrangerResult {
    pub driver: String,
    pub target: String,
    pub lag: usize,
    pub f_stat: f64,
    pub p_value: f64,
    /// Residual sums of squares of the restricted and unrestricted fits.
    pub rss_restricted: f64,
    pub rss_unrestricted: f64,
}

pub const DEFAULT_LAG: usize = 1;

/// Residual sum of squares of the least-squares fit of `y` on the columns
/// of `x` (row-major, `n × k`), via Householder QR. Fails when the design
/// is numerically rank deficient.
pub(crate) fn ols_rss(x: &[f64], n: usize, k: usize, y: &[f64]) -> Result<f64> {
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    let col_norms: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| a[i * k + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    for j in 0..k {
        let norm = (j..n).map(|i| a[i * k + j].powi(2)).sum::<f64>().sqrt();
        if norm <= 1e-10 * col_norms[j].max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateInput(format!(
                "design column {j} is collinear with earlier columns"
            )));
        }
        let alpha = if a[j * k + j] > 0.0 { -norm } else { norm };
        // v = a[j..,j] - alpha e_1
        let mut v: Vec<f64> = (j..n).map(|i| a[i * k + j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in j..k {
            let s: f64 = (j..n).map(|i| v[i - j] * a[i * k + c]).sum();
            let f = 2.0 * s / vnorm2;
            for i in j..n {
                a[i * k + c] -= f * v[i - j];
            }
        }
        let s: f64 = (j..n).map(|i| v[i - j] * b[i]).sum();
        let f = 2.0 * s / vnorm2;
        for i in j..n {
            b[i] -= f * v[i - j];
        }
    }
    Ok(b[k..].iter().map(|r| r * r).sum())
}

fn lagged_design(series: &[&[f64]], lag: usize) -> (Vec<f64>, usize, usize) {
    let n = series[0].len() - lag;
    let k = 1 + lag * series.len();
    let mut x = Vec::with_capacity(n * k);
    for t in lag..series[0].len() {
        x.push(1.0);
        for s in series {
            for l in 1..=lag {
                x.push(s[t - l]);
            }
        }
    }
    (x, n, k)
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Does `x` Granger-cause `y` at the given lag?
pub fn test_pair<T: Scalar>(x: &[T], y: &[T], lag: usize) -> Result<GrangerResult> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "series lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if lag == 0 {
        return Err(Error::invalid("lag must be at least 1"));
    }
    let needed = 3 * lag + 3;
    if x.len() < needed {
        return Err(Error::TooShort {
            needed,
            got: x.len(),
        });
    }
    let x: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
    if is_constant(&x) || is_constant(&y) {
        return Err(Error::DegenerateInput("constant series".into()));
    }
    let target = &y[lag..];
    let (xr, n_eff, kr) = lagged_design(&[&y], lag);
    let (xu, _, ku) = lagged_design(&[&y, &x], lag);
    let rss_r = ols_rss(&xr, n_eff, kr, target)?;
    let rss_u = ols_rss(&xu, n_eff, ku, target)?.min(rss_r);
    let df2 = (n_eff - 2 * lag - 1) as f64;
    let df1 = lag as f64;
    let f_stat = if rss_u > 0.0 {
        (((rss_r - rss_u) / df1) / (rss_u / df2)).max(0.0)
    } else if rss_r > 0.0 {
        f64::INFINITY
    } else {
        return Err(Error::DegenerateInput("both models fit exactly".into()));
    };
    Ok(GrangerResult {
        driver: String::new(),
        target: String::new(),
        lag,
        f_stat,
        p_value: f_survival(f_stat, df1, df2),
        rss_restricted: rss_r,
        rss_unrestricted: rss_u,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Screen {
    pub top: Vec<GrangerResult>,
    /// Pairs skipped because their test was degenerate.
    pub skipped: usize,
}

/// Tests every ordered gene pair and keeps the `top_k` largest F-statistics.
pub fn screen<T: Scalar>(m: &ExpressionMatrix<T>, lag: usize, top_k: usize) -> Result<Screen> {
    if m.n_genes() < 2 {
        return Err(Error::invalid("Granger screen needs at least two genes"));
    }
    let n = m.n_genes();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let outcomes: Vec<Result<GrangerResult>> = pairs
        .par_iter()
        .map(|&(d, t)| {
            test_pair(m.profile(d), m.profile(t), lag).map(|mut r| {
                r.driver = m.gene_ids()[d].clone();
                r.target = m.gene_ids()[t].clone();
                r
            })
        })
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    let mut skipped = 0;
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(Error::DegenerateInput(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::warn!("granger screen skipped {skipped} degenerate gene pairs");
    }
    results.sort_by(|a, b| {
        b.f_stat
            .total_cmp(&a.f_stat)
            .then_with(|| a.driver.cmp(&b.driver))
            .then_with(|| a.target.cmp(&b.target))
    });
    results.truncate(top_k);
    Ok(Screen {
        top: results,
        skipped,
    })
}

/// Gene order by descending total outgoing F-statistic, ties by index.
pub fn order_by_out_degree<T: Scalar>(m: &ExpressionMatrix<T>, lag: usize) -> Result<Vec<usize>> {
    let all = screen(m, lag, usize::MAX)?;
    let mut score = vec![0.0f64; m.n_genes()];
    for r in &all.top {
        let i = m.gene_index(&r.driver).expect("screened gene exists");
        if r.f_stat.is_finite() {
            score[i] += r.f_stat;
        }
    }
    let mut order: Vec<usize> = (0..m.n_genes()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    Ok(order)
}

pub fn results_csv(results: &[GrangerResult]) -> String {
    let mut s = String::from("driver,target,lag,f_stat,p_value\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.driver, r.target, r.lag, r.f_stat, r.p_value
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use crate::special::ln_gamma;
    use crate::synth::{generate, ChainEdge, SynthConfig};
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn lagged_pair(seed: u64, n: usize, coef: f64, sd: f64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = white(&mut rng, n);
        let mut y = vec![0.0; n];
        for t in 1..n {
            y[t] = coef * x[t - 1] + sd * rng.sample::<f64, _>(StandardNormal);
        }
        (x, y)
    }

    #[test]
    fn strong_lagged_dependence_is_significant() {
        let (x, y) = lagged_pair(1, 200, 0.9, 0.01);
        let r = test_pair(&x, &y, 1).unwrap();
        assert!(r.p_value < 1e-6, "p = {}", r.p_value);
        assert!(r.rss_unrestricted <= r.rss_restricted);
        // Reverse direction carries no information.
        let back = test_pair(&y, &x, 1).unwrap();
        assert!(back.f_stat < r.f_stat);
    }

    #[test]
    fn null_pairs_are_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 1000;
        let rejections = (0..trials)
            .filter(|_| {
                let x = white(&mut rng, 100);
                let y = white(&mut rng, 100);
                test_pair(&x, &y, 1).unwrap().p_value < 0.05
            })
            .count();
        assert!(
            rejections as f64 <= 0.10 * trials as f64,
            "{rejections} rejections"
        );
    }

    #[test]
    fn degenerate_and_short_inputs() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y = vec![3.0; 20];
        assert!(matches!(
            test_pair(&x, &y, 1),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            test_pair(&y, &x, 1),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            test_pair(&x[..5], &x[..5], 1),
            Err(Error::TooShort { needed: 6, got: 5 })
        ));
        assert!(test_pair(&x, &x[..10], 1).is_err());
    }

    #[test]
    fn f_stat_invariant_under_affine_rescaling() {
        let (x, y) = lagged_pair(3, 120, 0.4, 1.0);
        let base = test_pair(&x, &y, 2).unwrap().f_stat;
        let xs: Vec<f64> = x.iter().map(|v| 10.0 * v).collect();
        let ys: Vec<f64> = y.iter().map(|v| 0.5 * v + 3.0).collect();
        let f2 = test_pair(&xs, &ys, 2).unwrap().f_stat;
        assert!(((base - f2) / base).abs() < 1e-8);
    }

    #[test]
    fn nested_models_rss_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for lag in 1..4 {
            let x = white(&mut rng, 60);
            let y = white(&mut rng, 60);
            let r = test_pair(&x, &y, lag).unwrap();
            assert!(r.rss_unrestricted <= r.rss_restricted);
            assert!((0.0..=1.0).contains(&r.p_value));
        }
    }

    /// Simpson integration of the F density as an independent oracle for the
    /// survival function.
    fn f_survival_by_quadrature(f: f64, d1: f64, d2: f64) -> f64 {
        let ln_b = ln_gamma(d1 / 2.0) + ln_gamma(d2 / 2.0) - ln_gamma((d1 + d2) / 2.0);
        // Substitute x = d1 u / (d1 u + d2) -> beta density on (0, 1); integrate
        // the beta(d1/2, d2/2) density from x(f) to 1.
        let a = d1 / 2.0;
        let b = d2 / 2.0;
        let lo = d1 * f / (d1 * f + d2);
        let dens = |x: f64| -> f64 {
            if x <= 0.0 || x >= 1.0 {
                return 0.0;
            }
            ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_b).exp()
        };
        // Map [lo, 1] with t -> x = 1 - (1-lo)(1-t)^2 to tame the endpoint.
        let g = |t: f64| -> f64 {
            let x = 1.0 - (1.0 - lo) * (1.0 - t).powi(2);
            dens(x) * 2.0 * (1.0 - lo) * (1.0 - t)
        };
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut s = g(0.0) + g(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn f_survival_matches_quadrature_grid() {
        for &d1 in &[1.0, 2.0, 3.0, 5.0] {
            for &d2 in &[4.0, 10.0, 57.0] {
                for &f in &[0.2, 1.0, 2.5, 6.0] {
                    let got = f_survival(f, d1, d2);
                    let want = f_survival_by_quadrature(f, d1, d2);
                    assert!(
                        (got - want).abs() < 1e-8,
                        "d1={d1} d2={d2} f={f}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn p_value_monotone_in_f() {
        let mut prev = 1.0;
        for i in 1..50 {
            let p = f_survival(i as f64 * 0.3, 2.0, 40.0);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn screen_ranks_planted_direction() {
        let cfg = SynthConfig {
            n_genes: 2,
            n_spots: 150,
            n_cells: 150,
            chain_edges: vec![ChainEdge {
                driver: 0,
                target: 1,
                coefficient: 0.9,
                lag: 1,
            }],
            noise_sd: 0.05,
            dropout_rate: 0.0,
            seed: 4,
        };
        let d = generate::<f64>(&cfg).unwrap();
        let s = screen(&d.st, 1, 2).unwrap();
        assert_eq!(
            (s.top[0].driver.as_str(), s.top[0].target.as_str()),
            ("G0000", "G0001")
        );
        assert!(screen(&d.st, 1, 0).unwrap().top.is_empty());
    }

    #[test]
    fn screen_skips_constant_genes() {
        let m = ExpressionMatrix::new(
            vec!["A".into(), "B".into(), "C".into()],
            (0..12).map(|i| format!("o{i}")).collect(),
            Matrix::from_fn(3, 12, |g, j| {
                if g == 2 {
                    1.0
                } else {
                    ((j * (g + 3)) % 7) as f64
                }
            }),
            Modality::St,
        )
        .unwrap();
        let s = screen(&m, 1, 10).unwrap();
        assert_eq!(s.skipped, 4);
        assert_eq!(s.top.len(), 2);
    }
}
