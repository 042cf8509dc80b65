//! One-axis ablation sweeps: train one model per (seed, setting) and report
//! generation PCC on the training, validation and test genes.

use std::fmt;
use std::str::FromStr;

use log::info;

use crate::data::ExpressionMatrix;
use crate::diffusion::{DiffusionSchedule, SamplingStrategy};
use crate::error::{Error, Result};
use crate::generate::InferenceConfig;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::train::{fit, validation_pcc, Dataset, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Decay,
    Blocks,
    Sampling,
    Decoder,
    Variational,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Decay,
        Axis::Blocks,
        Axis::Sampling,
        Axis::Decoder,
        Axis::Variational,
    ];

    pub fn default_settings(self) -> Vec<Setting> {
        match self {
            Axis::Decay => [0.7, 0.8, 0.9, 1.0].map(Setting::Decay).to_vec(),
            Axis::Blocks => (1..=5).map(Setting::Blocks).collect(),
            Axis::Sampling => [
                SamplingStrategy::Full,
                SamplingStrategy::Fractional(2),
                SamplingStrategy::Fractional(3),
                SamplingStrategy::Fractional(4),
                SamplingStrategy::Fractional(20),
            ]
            .map(Setting::Sampling)
            .to_vec(),
            Axis::Decoder => vec![Setting::Decoder(false), Setting::Decoder(true)],
            Axis::Variational => vec![Setting::Variational(true), Setting::Variational(false)],
        }
    }

    pub fn parse_setting(self, raw: &str) -> Result<Setting> {
        let raw = raw.trim();
        let bad = || Error::Config(format!("{raw:?} is not a valid {self} setting"));
        let flag = || match raw {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(bad()),
        };
        Ok(match self {
            Axis::Decay => Setting::Decay(raw.parse().map_err(|_| bad())?),
            Axis::Blocks => Setting::Blocks(raw.parse().map_err(|_| bad())?),
            Axis::Sampling => Setting::Sampling(raw.parse().map_err(|_| bad())?),
            Axis::Decoder => Setting::Decoder(flag()?),
            Axis::Variational => Setting::Variational(flag()?),
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Decay => "decay",
            Axis::Blocks => "blocks",
            Axis::Sampling => "sampling",
            Axis::Decoder => "decoder",
            Axis::Variational => "variational",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "ablation axis {s:?} is not decay, blocks, sampling, decoder or variational"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Setting {
    Decay(f64),
    Blocks(usize),
    /// Applied to both training and inference.
    Sampling(SamplingStrategy),
    Decoder(bool),
    Variational(bool),
}

impl Setting {
    pub fn axis(self) -> Axis {
        match self {
            Setting::Decay(_) => Axis::Decay,
            Setting::Blocks(_) => Axis::Blocks,
            Setting::Sampling(_) => Axis::Sampling,
            Setting::Decoder(_) => Axis::Decoder,
            Setting::Variational(_) => Axis::Variational,
        }
    }

    fn apply(
        self,
        model: &mut ModelConfig,
        train: &mut TrainConfig,
        inference: &mut InferenceConfig,
    ) {
        match self {
            Setting::Decay(a) => train.ar_decay = a,
            Setting::Blocks(b) => model.blocks = b,
            Setting::Sampling(s) => {
                train.sampling = s;
                inference.strategy = s;
            }
            Setting::Decoder(on) => train.train_decoder = on,
            Setting::Variational(on) => model.variational = on,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let onoff = |b: bool| if b { "on" } else { "off" };
        match self {
            Setting::Decay(a) => write!(f, "{a}"),
            Setting::Blocks(b) => write!(f, "{b}"),
            Setting::Sampling(s) => write!(f, "{s}"),
            Setting::Decoder(b) | Setting::Variational(b) => f.write_str(onoff(*b)),
        }
    }
}

/// Everything except the swept axis.
#[derive(Clone, Debug)]
pub struct AblationBase<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: DiffusionSchedule<T>,
    pub inference: InferenceConfig,
    /// Also score the training genes (NaN otherwise).
    pub score_train: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: Setting,
    pub seed: u64,
    pub train_pcc: f64,
    pub val_pcc: f64,
    pub test_pcc: f64,
}

/// For every seed: split genes and train with that seed, once per setting.
/// Rows are ordered by seed, then setting.
pub fn run_ablation<T: Scalar>(
    st: &ExpressionMatrix<T>,
    sc: &ExpressionMatrix<T>,
    base: &AblationBase<T>,
    settings: &[Setting],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if settings.is_empty() || seeds.is_empty() {
        return Err(Error::invalid(
            "ablation needs at least one setting and one seed",
        ));
    }
    let mut rows = Vec::with_capacity(settings.len() * seeds.len());
    for &seed in seeds {
        let data = Dataset::new(st.clone(), sc.clone(), seed)?;
        for &setting in settings {
            rows.push(evaluate_setting(&data, base, setting, seed)?);
        }
    }
    Ok(rows)
}

/// Trains and scores one setting on a prepared dataset.
pub fn evaluate_setting<T: Scalar>(
    data: &Dataset<T>,
    base: &AblationBase<T>,
    setting: Setting,
    seed: u64,
) -> Result<AblationRow> {
    let mut model = base.model.clone();
    let mut train = TrainConfig {
        seed,
        ..base.train.clone()
    };
    let mut inference = InferenceConfig {
        seed,
        ..base.inference.clone()
    };
    setting.apply(&mut model, &mut train, &mut inference);
    let fitted = fit(data, &model, base.schedule.clone(), &train)?;
    let score = |genes: &[usize]| -> Result<f64> {
        if genes.is_empty() {
            Ok(f64::NAN)
        } else {
            validation_pcc(&fitted.model, data, genes, &inference)
        }
    };
    let row = AblationRow {
        setting,
        seed,
        train_pcc: if base.score_train {
            score(&data.split.train)?
        } else {
            f64::NAN
        },
        val_pcc: score(&data.split.val)?,
        test_pcc: score(&data.split.test)?,
    };
    info!(
        "ablation {}={} seed {}: train {:.4} val {:.4} test {:.4}",
        setting.axis(),
        setting,
        seed,
        row.train_pcc,
        row.val_pcc,
        row.test_pcc
    );
    Ok(row)
}

/// Per-setting means over seeds, in first-appearance order.
pub fn setting_means(rows: &[AblationRow]) -> Vec<(Setting, [f64; 3])> {
    let mut out: Vec<(Setting, [f64; 3], usize)> = Vec::new();
    for r in rows {
        let vals = [r.train_pcc, r.val_pcc, r.test_pcc];
        match out.iter_mut().find(|(s, _, _)| *s == r.setting) {
            Some((_, sum, n)) => {
                for (a, b) in sum.iter_mut().zip(vals) {
                    *a += b;
                }
                *n += 1;
            }
            None => out.push((r.setting, vals, 1)),
        }
    }
    out.into_iter()
        .map(|(s, sum, n)| (s, sum.map(|v| v / n as f64)))
        .collect()
}

/// `axis,setting,seed,train_pcc,val_pcc,test_pcc`, then one `mean` row per
/// setting.
pub fn report_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,setting,seed,train_pcc,val_pcc,test_pcc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.setting.axis(),
            r.setting,
            r.seed,
            r.train_pcc,
            r.val_pcc,
            r.test_pcc
        ));
    }
    for (setting, m) in setting_means(rows) {
        s.push_str(&format!(
            "{},{},mean,{:.6},{:.6},{:.6}\n",
            setting.axis(),
            setting,
            m[0],
            m[1],
            m[2]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_round_trip_and_default_grids() {
        for a in Axis::ALL {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
            for s in a.default_settings() {
                assert_eq!(s.axis(), a);
                assert_eq!(a.parse_setting(&s.to_string()).unwrap(), s);
            }
        }
        assert_eq!(Axis::Blocks.default_settings().len(), 5);
        assert!("depth".parse::<Axis>().is_err());
        assert!(Axis::Decoder.parse_setting("maybe").is_err());
    }

    #[test]
    fn means_group_by_setting() {
        let row = |setting, seed, v| AblationRow {
            setting,
            seed,
            train_pcc: v,
            val_pcc: v,
            test_pcc: v,
        };
        let rows = vec![
            row(Setting::Decay(0.8), 1, 0.5),
            row(Setting::Decay(1.0), 1, 0.2),
            row(Setting::Decay(0.8), 2, 0.7),
        ];
        let m = setting_means(&rows);
        assert_eq!(m.len(), 2);
        assert!((m[0].1[0] - 0.6).abs() < 1e-12);
        let csv = report_csv(&rows);
        assert!(csv.contains("decay,0.8,mean,0.600000"));
        assert_eq!(csv.lines().count(), 1 + 3 + 2);
    }
}
