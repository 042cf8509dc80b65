//! Flat `key = value` configuration files with `[section]` headers.
//!
//! Keys are addressed as `section.key` and must appear in [`REGISTRY`], which
//! fixes each key's type. Lines starting with `#` or `;` are comments. Keys
//! may also be overridden individually (`Config::set`), which is how the CLI
//! applies `--set section.key=value`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::data::PreprocessOptions;
use crate::diffusion::{
    DiffusionSchedule, SamplingStrategy, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T,
};
use crate::error::{Error, Result};
use crate::generate::InferenceConfig;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::synth::{ChainEdge, SynthConfig};
use crate::train::{GeneOrder, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Count,
    Real,
    Flag,
    Seed,
    Sampling,
    Order,
    Edges,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Count => "nonnegative integer",
            Kind::Real => "real",
            Kind::Flag => "true|false",
            Kind::Seed => "unsigned 64-bit integer",
            Kind::Sampling => "full|frac:<n>|adaptive",
            Kind::Order => "random|granger",
            Kind::Edges => "driver>target:coef:lag list",
        })
    }
}

/// Every accepted key with its type.
pub const REGISTRY: &[(&str, Kind)] = &[
    ("synth.n_genes", Kind::Count),
    ("synth.n_spots", Kind::Count),
    ("synth.n_cells", Kind::Count),
    ("synth.n_chains", Kind::Count),
    ("synth.chain_len", Kind::Count),
    ("synth.edges", Kind::Edges),
    ("synth.noise_sd", Kind::Real),
    ("synth.dropout_rate", Kind::Real),
    ("synth.seed", Kind::Seed),
    ("data.preprocess", Kind::Flag),
    ("data.min_genes_sc", Kind::Count),
    ("data.min_genes_st", Kind::Count),
    ("data.hvg_fraction", Kind::Real),
    ("model.d_model", Kind::Count),
    ("model.heads", Kind::Count),
    ("model.blocks", Kind::Count),
    ("model.hidden", Kind::Count),
    ("model.ffn_mult", Kind::Count),
    ("model.variational", Kind::Flag),
    ("diffusion.steps", Kind::Count),
    ("diffusion.beta_start", Kind::Real),
    ("diffusion.beta_end", Kind::Real),
    ("train.epochs", Kind::Count),
    ("train.batch_genes", Kind::Count),
    ("train.lr", Kind::Real),
    ("train.ar_decay", Kind::Real),
    ("train.train_decoder", Kind::Flag),
    ("train.sampling", Kind::Sampling),
    ("train.seed", Kind::Seed),
    ("train.n_t_samples", Kind::Count),
    ("train.ae_steps", Kind::Count),
    ("train.ae_lr", Kind::Real),
    ("train.lambda_rec", Kind::Real),
    ("train.lambda_kl", Kind::Real),
    ("train.lambda_align", Kind::Real),
    ("train.grad_clip", Kind::Real),
    ("train.val_every", Kind::Count),
    ("train.val_sampling", Kind::Sampling),
    ("train.gene_order", Kind::Order),
    ("generate.sampling", Kind::Sampling),
    ("generate.ar_groups", Kind::Count),
    ("generate.chunk_genes", Kind::Count),
];

pub fn kind_of(key: &str) -> Option<Kind> {
    REGISTRY
        .iter()
        .find(|(k, _)| *k == key)
        .map(|&(_, kind)| kind)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Count(usize),
    Real(f64),
    Flag(bool),
    Seed(u64),
    Sampling(SamplingStrategy),
    Order(GeneOrder),
    Edges(Vec<ChainEdge>),
}

fn parse_value(key: &str, kind: Kind, raw: &str) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: {raw:?} is not a {kind}"));
    Ok(match kind {
        Kind::Count => Value::Count(raw.parse().map_err(|_| bad())?),
        Kind::Real => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            Value::Real(v)
        }
        Kind::Flag => Value::Flag(match raw {
            "true" | "yes" | "on" | "1" => true,
            "false" | "no" | "off" | "0" => false,
            _ => return Err(bad()),
        }),
        Kind::Seed => Value::Seed(raw.parse().map_err(|_| bad())?),
        Kind::Sampling => Value::Sampling(raw.parse().map_err(|_| bad())?),
        Kind::Order => Value::Order(raw.parse().map_err(|_| bad())?),
        Kind::Edges => Value::Edges(parse_edges(raw).ok_or_else(bad)?),
    })
}

/// `0>1:0.9:1, 1>2:0.8:2`; coefficient and lag are optional (0.9 and 1).
fn parse_edges(raw: &str) -> Option<Vec<ChainEdge>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let mut parts = item.split(':');
            let (d, t) = parts.next()?.split_once('>')?;
            let coefficient = parts.next().map_or(Some(0.9), |c| c.trim().parse().ok())?;
            let lag = parts.next().map_or(Some(1), |l| l.trim().parse().ok())?;
            if parts.next().is_some() {
                return None;
            }
            Some(ChainEdge {
                driver: d.trim().parse().ok()?,
                target: t.trim().parse().ok()?,
                coefficient,
                lag,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", n + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            cfg.set(&full, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one registered key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let raw = raw.trim().trim_matches('"');
        let value = parse_value(key, kind, raw)?;
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Parses `section.key=value`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    fn count(&self, key: &str) -> Option<usize> {
        match self.values.get(key) {
            Some(Value::Count(v)) => Some(*v),
            _ => None,
        }
    }

    fn real(&self, key: &str) -> Option<f64> {
        match self.values.get(key) {
            Some(Value::Real(v)) => Some(*v),
            _ => None,
        }
    }

    fn flag(&self, key: &str) -> Option<bool> {
        match self.values.get(key) {
            Some(Value::Flag(v)) => Some(*v),
            _ => None,
        }
    }

    fn seed(&self, key: &str) -> Option<u64> {
        match self.values.get(key) {
            Some(Value::Seed(v)) => Some(*v),
            _ => None,
        }
    }

    fn sampling(&self, key: &str) -> Option<SamplingStrategy> {
        match self.values.get(key) {
            Some(Value::Sampling(v)) => Some(*v),
            _ => None,
        }
    }

    /// Planted chains (4 chains of 4 genes over 32 genes, 16 spots, 64 cells
    /// by default), or the explicit `synth.edges` list when given.
    pub fn synth(&self, default_seed: u64) -> Result<SynthConfig> {
        let n_genes = self.count("synth.n_genes").unwrap_or(32);
        let mut cfg = SynthConfig::planted_chains(
            n_genes,
            self.count("synth.n_spots").unwrap_or(16),
            self.count("synth.n_cells").unwrap_or(64),
            self.count("synth.n_chains").unwrap_or(4),
            self.count("synth.chain_len").unwrap_or(4),
            self.seed("synth.seed").unwrap_or(default_seed),
        );
        if let Some(Value::Edges(e)) = self.values.get("synth.edges") {
            cfg.chain_edges = e.clone();
        }
        if let Some(v) = self.real("synth.noise_sd") {
            cfg.noise_sd = v;
        }
        if let Some(v) = self.real("synth.dropout_rate") {
            cfg.dropout_rate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether raw inputs should go through QC, normalization and HVG
    /// selection (off by default: inputs are taken as already normalized).
    pub fn preprocess(&self) -> Option<PreprocessOptions> {
        if !self.flag("data.preprocess").unwrap_or(false) {
            return None;
        }
        let mut o = PreprocessOptions::default();
        if let Some(v) = self.count("data.min_genes_sc") {
            o.min_genes_sc = v;
        }
        if let Some(v) = self.count("data.min_genes_st") {
            o.min_genes_st = v;
        }
        if let Some(v) = self.real("data.hvg_fraction") {
            o.hvg_fraction = v;
        }
        Some(o)
    }

    pub fn model(&self, st_dim: usize, sc_dim: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(st_dim, sc_dim);
        if let Some(v) = self.count("model.d_model") {
            m.d_model = v;
        }
        if let Some(v) = self.count("model.heads") {
            m.heads = v;
        }
        if let Some(v) = self.count("model.blocks") {
            m.blocks = v;
        }
        if let Some(v) = self.count("model.hidden") {
            m.hidden = v;
        }
        if let Some(v) = self.count("model.ffn_mult") {
            m.ffn_mult = v;
        }
        if let Some(v) = self.flag("model.variational") {
            m.variational = v;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn schedule<T: Scalar>(&self) -> Result<DiffusionSchedule<T>> {
        DiffusionSchedule::linear(
            self.count("diffusion.steps").unwrap_or(DEFAULT_T),
            self.real("diffusion.beta_start")
                .unwrap_or(DEFAULT_BETA_START),
            self.real("diffusion.beta_end").unwrap_or(DEFAULT_BETA_END),
        )
    }

    pub fn train(&self, default_seed: u64) -> Result<TrainConfig> {
        let mut t = TrainConfig {
            seed: self.seed("train.seed").unwrap_or(default_seed),
            ..TrainConfig::default()
        };
        let counts: [(&str, &mut usize); 5] = [
            ("train.epochs", &mut t.epochs),
            ("train.batch_genes", &mut t.batch_genes),
            ("train.n_t_samples", &mut t.n_t_samples),
            ("train.ae_steps", &mut t.ae_steps),
            ("train.val_every", &mut t.val_every),
        ];
        for (k, slot) in counts {
            if let Some(v) = self.count(k) {
                *slot = v;
            }
        }
        let reals: [(&str, &mut f64); 7] = [
            ("train.lr", &mut t.lr),
            ("train.ar_decay", &mut t.ar_decay),
            ("train.ae_lr", &mut t.ae_lr),
            ("train.lambda_rec", &mut t.lambda_rec),
            ("train.lambda_kl", &mut t.lambda_kl),
            ("train.lambda_align", &mut t.lambda_align),
            ("train.grad_clip", &mut t.grad_clip),
        ];
        for (k, slot) in reals {
            if let Some(v) = self.real(k) {
                *slot = v;
            }
        }
        if let Some(v) = self.flag("train.train_decoder") {
            t.train_decoder = v;
        }
        if let Some(v) = self.sampling("train.sampling") {
            t.sampling = v;
        }
        if let Some(v) = self.sampling("train.val_sampling") {
            t.val_sampling = v;
        }
        if let Some(Value::Order(o)) = self.values.get("train.gene_order") {
            t.gene_order = *o;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn inference(&self, seed: u64) -> Result<InferenceConfig> {
        let c = InferenceConfig {
            strategy: self
                .sampling("generate.sampling")
                .unwrap_or(SamplingStrategy::Full),
            ar_groups: self.count("generate.ar_groups").unwrap_or(1),
            seed,
            chunk_genes: self.count("generate.chunk_genes").unwrap_or(0),
        };
        if c.ar_groups == 0 {
            return Err(Error::Config("generate.ar_groups must be positive".into()));
        }
        Ok(c)
    }
}
