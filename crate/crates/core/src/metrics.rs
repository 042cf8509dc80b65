//! Per-gene agreement metrics between predicted and measured spatial
//! expression: Pearson correlation, global SSIM, z-score RMSE and
//! Jensen–Shannon divergence. Variances are population variances throughout.

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

fn check_pair<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "metric inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("metrics need at least two observations"));
    }
    Ok(())
}

fn mean<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::of_usize(x.len())
}

/// (mean_a, mean_b, var_a, var_b, cov), population moments, two-pass.
fn moments<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T, T, T) {
    let (ma, mb) = (mean(a), mean(b));
    let n = T::of_usize(a.len());
    let (mut va, mut vb, mut cov) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (ma, mb, va / n, vb / n, cov / n)
}

pub fn pcc<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_pair(a, b)?;
    let (_, _, va, vb, cov) = moments(a, b);
    if va <= T::zero() || vb <= T::zero() {
        return Err(Error::DegenerateInput(
            "correlation undefined for a constant vector".into(),
        ));
    }
    let r = cov / (va.sqrt() * vb.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Single-window SSIM after jointly min-max scaling both vectors to [0, 1].
pub fn ssim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_pair(a, b)?;
    let lo = a.iter().chain(b).copied().fold(T::infinity(), T::min);
    let hi = a.iter().chain(b).copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if range <= T::zero() {
        return Ok(T::one());
    }
    let sa: Vec<T> = a.iter().map(|&x| (x - lo) / range).collect();
    let sb: Vec<T> = b.iter().map(|&x| (x - lo) / range).collect();
    let (ma, mb, va, vb, cov) = moments(&sa, &sb);
    let (c1, c2) = (T::of(SSIM_C1), T::of(SSIM_C2));
    let two = T::of(2.0);
    Ok(((two * ma * mb + c1) * (two * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

fn zscore<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let m = mean(x);
    let var = x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of_usize(x.len());
    if var <= T::zero() {
        return Err(Error::DegenerateInput(
            "z-score of a constant vector".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(x.iter().map(|&v| (v - m) / sd).collect())
}

/// Root mean squared difference of independently z-scored vectors.
pub fn rmse_z<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_pair(a, b)?;
    let (za, zb) = (zscore(a)?, zscore(b)?);
    let ss: T = za.iter().zip(&zb).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok((ss / T::of_usize(a.len())).sqrt())
}

pub const JS_EPSILON: f64 = 1e-12;

fn to_distribution<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let clamped: Vec<T> = x.iter().map(|&v| v.max(T::zero())).collect();
    if clamped.iter().all(|&v| v == T::zero()) {
        return Err(Error::DegenerateInput(
            "all-zero vector has no distribution".into(),
        ));
    }
    let eps = T::of(JS_EPSILON);
    let total: T = clamped.iter().map(|&v| v + eps).sum();
    Ok(clamped.iter().map(|&v| (v + eps) / total).collect())
}

/// Jensen–Shannon divergence (natural log) of the normalized vectors.
pub fn js_divergence<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_pair(a, b)?;
    let (p, q) = (to_distribution(a)?, to_distribution(b)?);
    let half = T::of(0.5);
    let mut js = T::zero();
    for (&pi, &qi) in p.iter().zip(&q) {
        let mi = half * (pi + qi);
        js += half * (pi * (pi / mi).ln() + qi * (qi / mi).ln());
    }
    Ok(js.max(T::zero()))
}

/// Population mean and variance.
pub fn aggregate<T: Scalar>(values: &[T]) -> Result<(T, T)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty list"));
    }
    let m = mean(values);
    let var = values.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::of_usize(values.len());
    Ok((m, var))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneScores<T> {
    pub pcc: T,
    pub ssim: T,
    pub rmse: T,
    pub js: T,
}

/// All four metrics for one gene.
pub fn score_gene<T: Scalar>(pred: &[T], truth: &[T]) -> Result<GeneScores<T>> {
    Ok(GeneScores {
        pcc: pcc(pred, truth)?,
        ssim: ssim(pred, truth)?,
        rmse: rmse_z(pred, truth)?,
        js: js_divergence(pred, truth)?,
    })
}

/// Mean and variance per metric across genes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary<T> {
    pub pcc: (T, T),
    pub ssim: (T, T),
    pub rmse: (T, T),
    pub js: (T, T),
}

pub fn summarize<T: Scalar>(scores: &[GeneScores<T>]) -> Result<MetricSummary<T>> {
    let col = |f: fn(&GeneScores<T>) -> T| -> Result<(T, T)> {
        aggregate(&scores.iter().map(f).collect::<Vec<_>>())
    };
    Ok(MetricSummary {
        pcc: col(|s| s.pcc)?,
        ssim: col(|s| s.ssim)?,
        rmse: col(|s| s.rmse)?,
        js: col(|s| s.js)?,
    })
}

/// Scores every gene of `pred` against the same gene in `truth`. A metric
/// that is undefined for a gene (constant or all-zero profile) is recorded as
/// NaN and left out of that metric's summary.
pub fn evaluate<T: Scalar>(
    pred: &ExpressionMatrix<T>,
    truth: &ExpressionMatrix<T>,
) -> Result<Evaluation> {
    if pred.obs_ids() != truth.obs_ids() {
        return Err(Error::shape(
            "prediction and truth have different observation ids or order",
        ));
    }
    if pred.n_genes() == 0 {
        return Err(Error::invalid("no genes to evaluate"));
    }
    let mut rows = Vec::with_capacity(pred.n_genes());
    for (i, g) in pred.gene_ids().iter().enumerate() {
        let j = truth
            .gene_index(g)
            .ok_or_else(|| Error::UnknownGene(g.clone()))?;
        let (p, t) = (pred.profile(i), truth.profile(j));
        let val = |r: Result<T>| r.map(|v| v.as_f64()).unwrap_or(f64::NAN);
        rows.push((
            g.clone(),
            GeneScores {
                pcc: val(pcc(p, t)),
                ssim: val(ssim(p, t)),
                rmse: val(rmse_z(p, t)),
                js: val(js_divergence(p, t)),
            },
        ));
    }
    let col = |f: fn(&GeneScores<f64>) -> f64| -> (f64, f64) {
        let v: Vec<f64> = rows
            .iter()
            .map(|(_, s)| f(s))
            .filter(|v| v.is_finite())
            .collect();
        aggregate(&v).unwrap_or((f64::NAN, f64::NAN))
    };
    let summary = MetricSummary {
        pcc: col(|s| s.pcc),
        ssim: col(|s| s.ssim),
        rmse: col(|s| s.rmse),
        js: col(|s| s.js),
    };
    Ok(Evaluation { rows, summary })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, GeneScores<f64>)>,
    pub summary: MetricSummary<f64>,
}

impl Evaluation {
    /// `gene_id,pcc,ssim,rmse,js` per gene, then `mean` and `variance` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gene_id,pcc,ssim,rmse,js\n");
        for (g, s) in &self.rows {
            out.push_str(&format!(
                "{g},{:.10},{:.10},{:.10},{:.10}\n",
                s.pcc, s.ssim, s.rmse, s.js
            ));
        }
        let m = &self.summary;
        out.push_str(&format!(
            "mean,{:.10},{:.10},{:.10},{:.10}\n",
            m.pcc.0, m.ssim.0, m.rmse.0, m.js.0
        ));
        out.push_str(&format!(
            "variance,{:.10},{:.10},{:.10},{:.10}\n",
            m.pcc.1, m.ssim.1, m.rmse.1, m.js.1
        ));
        out
    }
}

/// Pairwise `1 − PCC` between rows; pairs involving a constant row get 1.
pub fn correlation_distances<T: Scalar>(m: &Matrix<T>) -> Matrix<f64> {
    let n = m.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let r = pcc(m.row(i), m.row(j)).map(|v| v.as_f64()).unwrap_or(0.0);
            d[(i, j)] = 1.0 - r;
            d[(j, i)] = 1.0 - r;
        }
    }
    d
}

/// Square labelled matrix as CSV with `gene_id` in the corner.
pub fn labelled_csv(labels: &[String], columns: &[String], m: &Matrix<f64>) -> String {
    let mut out = String::from("gene_id");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in m.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 5.0).collect()
    }

    #[test]
    fn pcc_basic_cases() {
        let a = [1.0f64, 2.0, 3.0];
        assert!((pcc(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pcc(&a, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            pcc(&a, &[1.0, 1.0, 1.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(pcc(&a, &[1.0]).is_err());
    }

    #[test]
    fn pcc_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_vec(&mut rng, 40);
        let b = random_vec(&mut rng, 40);
        // Raw-sum formula, independent of the centered two-pass path.
        let n = a.len() as f64;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let want = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        assert!((pcc(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_cases() {
        let a = [0.0f64, 1.0, 4.0, 2.0];
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let shifted: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        assert!(ssim(&a, &shifted).unwrap() < 1.0);
        assert_eq!(ssim(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn ssim_hand_computed() {
        // a=[0,1,2], b=[2,1,0]: joint range [0,2] -> sa=[0,.5,1], sb=[1,.5,0].
        // means .5/.5, vars 1/6 each, cov -1/6.
        let (m, v, cov) = (0.5f64, 1.0 / 6.0, -1.0 / 6.0);
        let want = ((2.0 * m * m + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((2.0 * m * m + SSIM_C1) * (2.0 * v + SSIM_C2));
        let got = ssim(&[0.0, 1.0, 2.0], &[2.0, 1.0, 0.0]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn rmse_cases() {
        let a = [1.0f64, 4.0, 2.0, 8.0];
        assert!(rmse_z(&a, &a).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((rmse_z(&a, &neg).unwrap() - 2.0).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| 10.0 * x).collect();
        let b = [3.0, 1.0, 2.0, 5.0];
        assert!((rmse_z(&a, &b).unwrap() - rmse_z(&scaled, &b).unwrap()).abs() < 1e-12);
        assert!(rmse_z(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn js_cases() {
        let a = [1.0f64, 2.0, 3.0];
        assert!(js_divergence(&a, &a).unwrap().abs() < 1e-15);
        let d = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(js_divergence(&[0.0, -1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn js_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_vec(&mut rng, 30);
        let b = random_vec(&mut rng, 30);
        let norm = |x: &[f64]| -> Vec<f64> {
            let t: f64 = x.iter().map(|v| v + JS_EPSILON).sum();
            x.iter().map(|v| (v + JS_EPSILON) / t).collect()
        };
        let (p, q) = (norm(&a), norm(&b));
        let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| (x + y) / 2.0).collect();
        let kl = |x: &[f64]| -> f64 { x.iter().zip(&m).map(|(xi, mi)| xi * (xi / mi).ln()).sum() };
        let want = 0.5 * kl(&p) + 0.5 * kl(&q);
        assert!((js_divergence(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate(&[1.0, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        assert_eq!(aggregate(&[0.0, 1.0]).unwrap(), (0.5, 0.25));
        assert!(aggregate::<f64>(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_vec(&mut rng, 100);
        let m = v.iter().sum::<f64>() / 100.0;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 100.0;
        let (gm, gv) = aggregate(&v).unwrap();
        assert!((gm - m).abs() < 1e-12 && (gv - var).abs() < 1e-12);
    }

    #[test]
    fn f32_metrics_work() {
        let a = [1.0f32, 2.0, 4.0];
        assert!((pcc(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!(js_divergence(&a, &a).unwrap().abs() < 1e-6);
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..20).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..10.0, n),
                prop::collection::vec(0.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn pcc_symmetric_and_affine_invariant((a, b) in vec_strategy(), k in 0.1f64..10.0, c in -5.0f64..5.0) {
            prop_assume!(zscore(&a).is_ok() && zscore(&b).is_ok());
            let r = pcc(&a, &b).unwrap();
            prop_assert!((r - pcc(&b, &a).unwrap()).abs() < 1e-12);
            let a2: Vec<f64> = a.iter().map(|x| k * x + c).collect();
            prop_assert!((r - pcc(&a2, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn js_symmetric_and_bounded((a, b) in vec_strategy()) {
            prop_assume!(a.iter().any(|&x| x > 0.0) && b.iter().any(|&x| x > 0.0));
            let d = js_divergence(&a, &b).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&d));
            prop_assert!((d - js_divergence(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn rmse_affine_invariant((a, b) in vec_strategy(), k1 in 0.1f64..10.0, k2 in 0.1f64..10.0, c in -5.0f64..5.0) {
            prop_assume!(zscore(&a).is_ok() && zscore(&b).is_ok());
            let a2: Vec<f64> = a.iter().map(|x| k1 * x + c).collect();
            let b2: Vec<f64> = b.iter().map(|x| k2 * x - c).collect();
            prop_assert!((rmse_z(&a, &b).unwrap() - rmse_z(&a2, &b2).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_matches_genes_by_id_and_flags_degenerate() {
        use crate::data::Modality;
        let obs: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let truth = ExpressionMatrix::new(
            vec!["a".into(), "b".into()],
            obs.clone(),
            Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 2.0]]),
            Modality::St,
        )
        .unwrap();
        let pred = ExpressionMatrix::new(
            vec!["b".into(), "a".into()],
            obs,
            Matrix::from_rows(&[vec![1.0, 1.0, 1.0, 1.0], vec![2.0, 4.0, 6.0, 8.0]]),
            Modality::St,
        )
        .unwrap();
        let e = evaluate(&pred, &truth).unwrap();
        assert!(e.rows[0].1.pcc.is_nan());
        assert!((e.rows[1].1.pcc - 1.0).abs() < 1e-12);
        assert!((e.summary.pcc.0 - 1.0).abs() < 1e-12);
        let csv = e.to_csv();
        assert!(csv.starts_with("gene_id,pcc,ssim,rmse,js\nb,NaN"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn distances_are_symmetric_with_zero_diagonal() {
        let m = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![3.0, 2.0, 1.0],
            vec![2.0, 4.0, 6.5],
        ]);
        let d = correlation_distances(&m);
        assert!((d[(0, 1)] - 2.0).abs() < 1e-12);
        assert_eq!(d[(1, 0)], d[(0, 1)]);
        assert_eq!(d[(2, 2)], 0.0);
        assert!(d[(0, 2)] < 0.01);
    }
}
