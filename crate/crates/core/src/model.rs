//! The causal autoregressive transformer over gene tokens.
//!
//! Parameters live in one flat store; forward passes bind them into an
//! [`autodiff::Graph`](crate::autodiff::Graph) so the same code serves
//! inference and training.
//!
//! Token layout is `[condition | clean | noisy]`. Each clean and noisy token
//! additionally receives a projection of its own gene's SC latent (its
//! anchor), which identifies the gene without positional encodings. Noisy
//! tokens also receive the time embedding.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::arplan::ARStepPlan;
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const TIME_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Observations per gene in the ST modality (`p`).
    pub st_dim: usize,
    /// Observations per gene in the SC modality (`q`).
    pub sc_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of the encoder and decoder MLPs.
    pub hidden: usize,
    pub ffn_mult: usize,
    pub variational: bool,
}

impl ModelConfig {
    pub fn new(st_dim: usize, sc_dim: usize) -> Self {
        ModelConfig {
            st_dim,
            sc_dim,
            d_model: 64,
            heads: 4,
            blocks: 3,
            hidden: 128,
            ffn_mult: 4,
            variational: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.st_dim,
            self.sc_dim,
            self.d_model,
            self.heads,
            self.hidden,
            self.ffn_mult,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn to_values(&self) -> Vec<f64> {
        [
            self.st_dim,
            self.sc_dim,
            self.d_model,
            self.heads,
            self.blocks,
            self.hidden,
            self.ffn_mult,
            usize::from(self.variational),
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 8 || v.iter().any(|x| !(x.fract() == 0.0 && *x >= 0.0)) {
            return Err(Error::Checkpoint("malformed model.config tensor".into()));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = ModelConfig {
            st_dim: u(0),
            sc_dim: u(1),
            d_model: u(2),
            heads: u(3),
            blocks: u(4),
            hidden: u(5),
            ffn_mult: u(6),
            variational: u(7) != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter ownership, used to freeze parts of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    StEncoder,
    ScEncoder,
    Decoder,
    Cat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    l1: Linear,
    l2: Linear,
    /// Bias-free linear path added to the output.
    skip: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    e1: Mlp,
    e1_logvar: Option<Linear>,
    e2: Mlp,
    decoder: Mlp,
    kind: ParamId,
    anchor: Linear,
    time: Linear,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
}

/// Which encoder head to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    St,
    Sc,
}

/// Role of a token in the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Condition,
    Clean,
    Noisy,
}

impl TokenKind {
    fn index(self) -> usize {
        match self {
            TokenKind::Condition => 0,
            TokenKind::Clean => 1,
            TokenKind::Noisy => 2,
        }
    }
}

struct Builder<'r, T> {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Matrix<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, group: ParamGroup, m: Matrix<T>) -> ParamId {
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(m);
        ParamId(self.tensors.len() - 1)
    }

    fn normal(&mut self, name: String, group: ParamGroup, r: usize, c: usize, sd: f64) -> ParamId {
        let dist = Normal::new(0.0, sd).expect("positive sd");
        let rng = &mut *self.rng;
        let m = Matrix::from_fn(r, c, |_, _| T::of(dist.sample(rng)));
        self.push(name, group, m)
    }

    fn constant(&mut self, name: String, group: ParamGroup, r: usize, c: usize, v: f64) -> ParamId {
        self.push(name, group, Matrix::filled(r, c, T::of(v)))
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.normal(
            format!("{name}.w"),
            group,
            fan_in,
            fan_out,
            1.0 / (fan_in as f64).sqrt(),
        );
        let b = self.constant(format!("{name}.b"), group, 1, fan_out, 0.0);
        Linear { w, b }
    }

    fn mlp(&mut self, name: &str, group: ParamGroup, i: usize, h: usize, o: usize) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.l1"), group, i, h),
            l2: self.linear(&format!("{name}.l2"), group, h, o),
            skip: self.normal(format!("{name}.skip"), group, i, o, 1.0 / (i as f64).sqrt()),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), ParamGroup::Cat, 1, d, 1.0),
            beta: self.constant(format!("{name}.beta"), ParamGroup::Cat, 1, d, 0.0),
        }
    }
}

/// All network weights plus their layout.
#[derive(Clone, Debug)]
pub struct CatParameters<T> {
    config: ModelConfig,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Matrix<T>>,
    layout: Layout,
}

/// Graph handles for every parameter, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Output of an encoder head on a batch of genes (one row per gene).
#[derive(Clone, Debug)]
pub struct Encoded<V> {
    /// Sampled latent when variational, otherwise the mean.
    pub z: V,
    pub mean: V,
    pub logvar: Option<V>,
}

/// Graph-level inputs of one CAT evaluation.
pub struct CatInputs<'p, T> {
    pub cond: Var,
    pub clean: Var,
    pub noisy: Var,
    /// One row per sample token: the SC latent of that token's gene.
    pub anchors: Var,
    pub timesteps: &'p [usize],
    /// `ᾱ_t` of each sample token.
    pub alpha_bars: &'p [T],
    pub allowed: Arc<Vec<Vec<usize>>>,
}

/// Sinusoidal timestep features, one row per entry of `t`.
pub fn timestep_features<T: Scalar>(t: &[usize], d: usize) -> Matrix<T> {
    let half = d / 2;
    Matrix::from_fn(t.len(), d, |r, c| {
        let i = c / 2;
        if i >= half {
            return T::zero();
        }
        let freq = TIME_BASE.powf(-(i as f64) / half as f64);
        let x = t[r] as f64 * freq;
        T::of(if c % 2 == 0 { x.sin() } else { x.cos() })
    })
}

impl<T: Scalar> CatParameters<T> {
    /// Randomly initialized weights: normal with variance `1/fan_in` for
    /// weight matrices, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q, d, h) = (config.st_dim, config.sc_dim, config.d_model, config.hidden);
        let mut b = Builder {
            names: Vec::new(),
            groups: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        use ParamGroup::*;
        let e1 = b.mlp("e1", StEncoder, p, h, d);
        let e1_logvar = config
            .variational
            .then(|| b.linear("e1.logvar", StEncoder, h, d));
        let e2 = b.mlp("e2", ScEncoder, q, h, d);
        let decoder = b.mlp("decoder", Decoder, d, h, p);
        let kind = b.normal("cat.kind".into(), Cat, 3, d, 0.1);
        let anchor = b.linear("cat.anchor", Cat, d, d);
        let time = b.linear("cat.time", Cat, d, d);
        let ff = d * config.ffn_mult;
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = format!("cat.block{i}");
                let sd = 1.0 / (d as f64).sqrt();
                Block {
                    ln1: b.norm(&format!("{n}.ln1"), d),
                    wq: b.normal(format!("{n}.wq"), Cat, d, d, sd),
                    wk: b.normal(format!("{n}.wk"), Cat, d, d, sd),
                    wv: b.normal(format!("{n}.wv"), Cat, d, d, sd),
                    out: b.linear(&format!("{n}.out"), Cat, d, d),
                    ln2: b.norm(&format!("{n}.ln2"), d),
                    ff1: b.linear(&format!("{n}.ff1"), Cat, d, ff),
                    ff2: b.linear(&format!("{n}.ff2"), Cat, ff, d),
                }
            })
            .collect();
        let ln_f = b.norm("cat.ln_f", d);
        let head = b.linear("cat.head", Cat, d, d);
        let Builder {
            names,
            groups,
            tensors,
            ..
        } = b;
        Ok(CatParameters {
            config: config.clone(),
            names,
            groups,
            tensors,
            layout: Layout {
                e1,
                e1_logvar,
                e2,
                decoder,
                kind,
                anchor,
                time,
                blocks,
                ln_f,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id.0]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Inserts every parameter into `g`; groups for which `trainable`
    /// returns false become constants.
    pub fn bind<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.groups)
            .map(|(m, &grp)| {
                if trainable(grp) {
                    g.param(m)
                } else {
                    g.constant_ref(m)
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear(&self, g: &mut Graph<'_, T>, b: &Bound, l: Linear, x: Var) -> Var {
        let y = g.matmul(x, b.var(l.w));
        g.add_row(y, b.var(l.b))
    }

    /// `gelu(x W1 + b1) W2 + b2 + x S`; also returns the hidden layer.
    fn mlp(&self, g: &mut Graph<'_, T>, b: &Bound, m: Mlp, x: Var) -> (Var, Var) {
        let h = self.linear(g, b, m.l1, x);
        let h = g.gelu(h);
        let y = self.linear(g, b, m.l2, h);
        let s = g.matmul(x, b.var(m.skip));
        (g.add(y, s), h)
    }

    fn check_width(&self, g: &Graph<'_, T>, x: Var, want: usize, what: &str) -> Result<()> {
        let got = g.value(x).cols();
        if got != want {
            return Err(Error::shape(format!(
                "{what} has width {got}, expected {want}"
            )));
        }
        Ok(())
    }

    /// Encoder head on rows of `x`. With a variational ST head and `noise`
    /// given, `z = mean + exp(½·logvar)·noise`.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        head: Head,
        x: Var,
        noise: Option<&Matrix<T>>,
    ) -> Result<Encoded<Var>> {
        let (mlp, width) = match head {
            Head::St => (self.layout.e1, self.config.st_dim),
            Head::Sc => (self.layout.e2, self.config.sc_dim),
        };
        self.check_width(g, x, width, "encoder input")?;
        let (mean, hidden) = self.mlp(g, b, mlp, x);
        let logvar_head = if head == Head::St {
            self.layout.e1_logvar
        } else {
            None
        };
        let Some(lv_lin) = logvar_head else {
            return Ok(Encoded {
                z: mean,
                mean,
                logvar: None,
            });
        };
        let lv = self.linear(g, b, lv_lin, hidden);
        let lv = g.clamp(lv, T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
        let z = match noise {
            Some(eps) => {
                if eps.shape() != g.value(mean).shape() {
                    return Err(Error::shape("encoder noise shape"));
                }
                let half = g.scale(lv, T::of(0.5));
                let sd = g.exp(half);
                let e = g.constant(eps.clone());
                let spread = g.mul(sd, e);
                g.add(mean, spread)
            }
            None => mean,
        };
        Ok(Encoded {
            z,
            mean,
            logvar: Some(lv),
        })
    }

    pub fn decode_graph(&self, g: &mut Graph<'_, T>, b: &Bound, z: Var) -> Result<Var> {
        self.check_width(g, z, self.config.d_model, "latent")?;
        Ok(self.mlp(g, b, self.layout.decoder, z).0)
    }

    /// Predicted noise for every sample token (`s × d`).
    ///
    /// The head output is read as a clean-latent estimate `x̂₀` and converted
    /// with `ε̂ = (x_t − √ᾱ_t·x̂₀) / √(1 − ᾱ_t)`; rows with `ᾱ_t = 1` give 0.
    pub fn cat_graph(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        inp: &CatInputs<'_, T>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        for (v, what) in [
            (inp.cond, "condition tokens"),
            (inp.clean, "clean tokens"),
            (inp.noisy, "noisy tokens"),
            (inp.anchors, "anchors"),
        ] {
            self.check_width(g, v, d, what)?;
        }
        let c = g.value(inp.cond).rows();
        let v = g.value(inp.clean).rows();
        let s = g.value(inp.noisy).rows();
        if g.value(inp.anchors).rows() != s
            || inp.timesteps.len() != s
            || inp.alpha_bars.len() != s
            || v > s
        {
            return Err(Error::shape(format!(
                "{s} sample tokens but {} anchors, {} timesteps, {v} clean tokens",
                g.value(inp.anchors).rows(),
                inp.timesteps.len()
            )));
        }
        let seq = c + v + s;
        if inp.allowed.len() != seq {
            return Err(Error::shape(format!(
                "mask covers {} tokens, sequence has {seq}",
                inp.allowed.len()
            )));
        }

        let mut onehot = Matrix::zeros(seq, 3);
        for r in 0..seq {
            let k = if r < c {
                TokenKind::Condition
            } else if r < c + v {
                TokenKind::Clean
            } else {
                TokenKind::Noisy
            };
            onehot[(r, k.index())] = T::one();
        }
        let onehot = g.constant(onehot);
        let kind = g.matmul(onehot, b.var(self.layout.kind));

        let anchor = self.linear(g, b, self.layout.anchor, inp.anchors);
        let anchor_clean = g.slice_rows(anchor, 0, v);
        let tf = g.constant(timestep_features(inp.timesteps, d));
        let temb = self.linear(g, b, self.layout.time, tf);
        let noisy_extra = g.add(anchor, temb);
        let cond_extra = g.constant(Matrix::zeros(c, d));
        let extra = g.concat_rows(&[cond_extra, anchor_clean, noisy_extra]);
        let raw = g.concat_rows(&[inp.cond, inp.clean, inp.noisy]);
        let x = g.add(raw, kind);
        let mut x = g.add(x, extra);

        let heads = self.config.heads;
        let dh = d / heads;
        let inv_sqrt = T::one() / T::of_usize(dh).sqrt();
        for blk in &self.layout.blocks {
            let h = g.layer_norm(x, b.var(blk.ln1.gamma), b.var(blk.ln1.beta));
            let q = g.matmul(h, b.var(blk.wq));
            let k = g.matmul(h, b.var(blk.wk));
            let vv = g.matmul(h, b.var(blk.wv));
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, lo, hi);
                let kh = g.slice_cols(k, lo, hi);
                let vh = g.slice_cols(vv, lo, hi);
                let scores = g.matmul_nt(qh, kh);
                let scores = g.scale(scores, inv_sqrt);
                let attn = g.masked_softmax(scores, inp.allowed.clone());
                outs.push(g.matmul(attn, vh));
            }
            let cat = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat_cols(&outs)
            };
            let o = self.linear(g, b, blk.out, cat);
            x = g.add(x, o);
            let h2 = g.layer_norm(x, b.var(blk.ln2.gamma), b.var(blk.ln2.beta));
            let f = self.linear(g, b, blk.ff1, h2);
            let f = g.gelu(f);
            let f = self.linear(g, b, blk.ff2, f);
            x = g.add(x, f);
        }
        let y = g.slice_rows(x, c + v, seq);
        let y = g.layer_norm(
            y,
            b.var(self.layout.ln_f.gamma),
            b.var(self.layout.ln_f.beta),
        );
        let f = self.linear(g, b, self.layout.head, y);
        let mut inv = Vec::with_capacity(s);
        let mut ratio = Vec::with_capacity(s);
        for &a in inp.alpha_bars {
            let sd = (T::one() - a).sqrt();
            if sd > T::zero() {
                inv.push(T::one() / sd);
                ratio.push(a.sqrt() / sd);
            } else {
                inv.push(T::zero());
                ratio.push(T::zero());
            }
        }
        let xt = g.scale_rows(inp.noisy, inv);
        let x0 = g.scale_rows(f, ratio);
        Ok(g.sub(xt, x0))
    }

    /// Encodes each row of `x`. The ST head samples with `rng` when the
    /// model is variational and an rng is supplied.
    pub fn encode(
        &self,
        x: &Matrix<T>,
        head: Head,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Encoded<Matrix<T>>> {
        let noise = match rng {
            Some(rng) if head == Head::St && self.config.variational => {
                Some(Matrix::from_fn(x.rows(), self.config.d_model, |_, _| {
                    T::of(rng.sample::<f64, _>(StandardNormal))
                }))
            }
            _ => None,
        };
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let xv = g.constant_ref(x);
        let e = self.encode_graph(&mut g, &b, head, xv, noise.as_ref())?;
        Ok(Encoded {
            z: g.value(e.z).clone(),
            mean: g.value(e.mean).clone(),
            logvar: e.logvar.map(|v| g.value(v).clone()),
        })
    }

    /// Decodes each latent row to feature space.
    pub fn decode(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        if !z.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                what: "non-finite latent passed to decoder".into(),
                max_abs: z.max_abs().as_f64(),
            });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let zv = g.constant_ref(z);
        let out = self.decode_graph(&mut g, &b, zv)?;
        Ok(g.value(out).clone())
    }

    /// Predicted noise (`s × d`) for a token batch under `mask`.
    pub fn cat_forward(
        &self,
        batch: &TokenBatch<T>,
        mask: &AttentionMask,
        schedule: &DiffusionSchedule<T>,
    ) -> Result<Matrix<T>> {
        batch.check_against(mask)?;
        let alpha_bars = batch
            .timesteps
            .iter()
            .map(|&t| schedule.check_t(t).map(|_| schedule.alpha_bar(t)))
            .collect::<Result<Vec<T>>>()?;
        let (c, v) = (mask.condition_len(), mask.visible_len());
        let seq = mask.seq();
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let cond = g.constant(batch.tokens.slice_rows(0, c));
        let clean = g.constant(batch.tokens.slice_rows(c, c + v));
        let noisy = g.constant(batch.tokens.slice_rows(c + v, seq));
        let anchors = g.constant_ref(&batch.anchors);
        let inp = CatInputs {
            cond,
            clean,
            noisy,
            anchors,
            timesteps: &batch.timesteps,
            alpha_bars: &alpha_bars,
            allowed: Arc::new(mask.allowed_columns()),
        };
        let out = self.cat_graph(&mut g, &b, &inp)?;
        let value = g.value(out);
        if !value.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                what: "non-finite activation in CAT forward".into(),
                max_abs: g.max_abs_value(),
            });
        }
        Ok(value.clone())
    }

    /// All tensors plus `model.config`, converted to 64-bit.
    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.insert_values("model.config", &self.config.to_values());
        for (name, m) in self.names.iter().zip(&self.tensors) {
            ckpt.insert(name.clone(), m.to_f64());
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_values(ckpt.require("model.config")?.as_slice())?;
        let mut params = Self::init(&config, 0)?;
        for i in 0..params.tensors.len() {
            let m = ckpt.require(&params.names[i])?;
            if m.shape() != params.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    params.names[i],
                    m.shape(),
                    params.tensors[i].shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} holds non-finite values",
                    params.names[i]
                )));
            }
            params.tensors[i] = Matrix::from_f64(m);
        }
        Ok(params)
    }
}

/// A concrete token sequence for one CAT evaluation.
#[derive(Clone, Debug)]
pub struct TokenBatch<T> {
    /// `seq × d` latents in `[condition | clean | noisy]` order.
    pub tokens: Matrix<T>,
    /// `s × d` SC latents of each sample token's gene.
    pub anchors: Matrix<T>,
    pub kinds: Vec<TokenKind>,
    pub plan: ARStepPlan,
    /// Timestep of each noisy token.
    pub timesteps: Vec<usize>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn new(
        cond: &Matrix<T>,
        clean: &Matrix<T>,
        noisy: &Matrix<T>,
        anchors: Matrix<T>,
        plan: ARStepPlan,
        timesteps: Vec<usize>,
    ) -> Result<Self> {
        let s = noisy.rows();
        if plan.len() != s || plan.visible_len() != clean.rows() {
            return Err(Error::shape(format!(
                "plan {plan} does not match {} clean and {s} noisy tokens",
                clean.rows()
            )));
        }
        if timesteps.len() != s || timesteps.contains(&0) {
            return Err(Error::invalid("every noisy token needs a timestep >= 1"));
        }
        let mut kinds = vec![TokenKind::Condition; cond.rows()];
        kinds.extend(std::iter::repeat_n(TokenKind::Clean, clean.rows()));
        kinds.extend(std::iter::repeat_n(TokenKind::Noisy, s));
        Ok(TokenBatch {
            tokens: Matrix::vstack(&[cond, clean, noisy]),
            anchors,
            kinds,
            plan,
            timesteps,
        })
    }

    fn check_against(&self, mask: &AttentionMask) -> Result<()> {
        let count = |k: TokenKind| self.kinds.iter().filter(|&&x| x == k).count();
        let layout_ok = self.kinds.len() == mask.seq()
            && self.tokens.rows() == mask.seq()
            && count(TokenKind::Condition) == mask.condition_len()
            && count(TokenKind::Clean) == mask.visible_len()
            && count(TokenKind::Noisy) == mask.sample_len()
            && self.kinds.windows(2).all(|w| w[0].index() <= w[1].index());
        if !layout_ok {
            return Err(Error::shape("token kinds do not match the mask layout"));
        }
        Ok(())
    }
}

/// Fills a matrix with standard normal draws.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        T::of(rng.sample::<f64, _>(StandardNormal))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_mask;

    fn sched() -> DiffusionSchedule<f64> {
        DiffusionSchedule::linear(50, 1e-4, 2e-2).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            st_dim: 5,
            sc_dim: 7,
            d_model: 8,
            heads: 2,
            blocks: 2,
            hidden: 6,
            ffn_mult: 2,
            variational: true,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, c: usize, plan: &ARStepPlan, d: usize) -> TokenBatch<f64> {
        let s = plan.len();
        let v = plan.visible_len();
        let ts = (0..s).map(|_| rng.random_range(1..=50)).collect();
        TokenBatch::new(
            &standard_normal(c, d, rng),
            &standard_normal(v, d, rng),
            &standard_normal(s, d, rng),
            standard_normal(s, d, rng),
            plan.clone(),
            ts,
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_head_count() {
        let mut cfg = small();
        cfg.heads = 3;
        assert!(CatParameters::<f64>::init(&cfg, 0).is_err());
    }

    #[test]
    fn zero_weights_give_bias_activation() {
        let mut p = CatParameters::<f64>::init(&small(), 1).unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            if p.name(id).starts_with("e2.") {
                // zeroes weights and the skip path, sets biases to 0.3
                let m = p.tensor_mut(id);
                let fill = if m.rows() == 1 { 0.3 } else { 0.0 };
                *m = Matrix::filled(m.rows(), m.cols(), fill);
            }
        }
        let out = p.encode(&Matrix::zeros(1, 7), Head::Sc, None).unwrap();
        // gelu(0.3) * 0 + 0.3
        assert!(out.z.as_slice().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn encode_is_deterministic_without_sampling() {
        let p = CatParameters::<f64>::init(&small(), 2).unwrap();
        let x = Matrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64 * 0.1);
        let a = p.encode(&x, Head::St, None).unwrap();
        let b = p.encode(&x, Head::St, None).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.z, a.mean);
    }

    #[test]
    fn clamped_logvar_sample_equals_mean() {
        let mut p = CatParameters::<f64>::init(&small(), 3).unwrap();
        let bias = p.ids().find(|&id| p.name(id) == "e1.logvar.b").unwrap();
        let w = p.ids().find(|&id| p.name(id) == "e1.logvar.w").unwrap();
        let shape = p.tensor(w).shape();
        *p.tensor_mut(w) = Matrix::zeros(shape.0, shape.1);
        *p.tensor_mut(bias) = Matrix::filled(1, 8, -1e6);
        let x = Matrix::from_fn(2, 5, |r, c| (r + c) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = p.encode(&x, Head::St, Some(&mut rng)).unwrap();
        let lv = out.logvar.unwrap();
        assert!(lv.as_slice().iter().all(|&v| v == LOGVAR_MIN));
        for (z, m) in out.z.as_slice().iter().zip(out.mean.as_slice()) {
            assert!((z - m).abs() < 1e-4);
        }
    }

    #[test]
    fn decode_shape_and_zero_latent() {
        let p = CatParameters::<f64>::init(&small(), 4).unwrap();
        let out = p.decode(&Matrix::zeros(3, 8)).unwrap();
        assert_eq!(out.shape(), (3, 5));
        // Zero latent with zero biases decodes to exactly zero.
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert!(p.decode(&Matrix::zeros(1, 7)).is_err());
    }

    #[test]
    fn forward_output_shape_and_finiteness() {
        let p = CatParameters::<f64>::init(&small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = ARStepPlan::from_sizes(&[2, 2, 3]).unwrap();
        let b = batch(&mut rng, 2, &plan, 8);
        let mask = build_mask(7, 2, &plan).unwrap();
        let out = p.cat_forward(&b, &mask, &sched()).unwrap();
        assert_eq!(out.shape(), (7, 8));
        assert!(out.is_finite());
        // Large but bounded inputs stay finite.
        let mut big = b.clone();
        big.tokens = big.tokens.scale(1e3);
        big.anchors = big.anchors.scale(1e3);
        assert!(p.cat_forward(&big, &mask, &sched()).unwrap().is_finite());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let p = CatParameters::<f64>::init(&small(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = ARStepPlan::from_sizes(&[2, 2, 3]).unwrap();
        let b = batch(&mut rng, 2, &plan, 8);
        let mask = build_mask(7, 3, &plan).unwrap();
        assert!(p.cat_forward(&b, &mask, &sched()).is_err());
    }

    #[test]
    fn condition_permutation_invariance() {
        let p = CatParameters::<f64>::init(&small(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plan = ARStepPlan::from_sizes(&[3, 1]).unwrap();
        let b = batch(&mut rng, 4, &plan, 8);
        let mask = build_mask(4, 4, &plan).unwrap();
        let mut permuted = b.clone();
        let order = [2, 0, 3, 1];
        for (dst, &src) in order.iter().enumerate() {
            permuted
                .tokens
                .row_mut(dst)
                .copy_from_slice(b.tokens.row(src));
        }
        let a = p.cat_forward(&b, &mask, &sched()).unwrap();
        let c = p.cat_forward(&permuted, &mask, &sched()).unwrap();
        for (x, y) in a.as_slice().iter().zip(c.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn self_only_attention_returns_own_value() {
        // One condition-free single-token step: softmax over a singleton.
        let cfg = ModelConfig {
            blocks: 1,
            ..small()
        };
        let p = CatParameters::<f64>::init(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let plan = ARStepPlan::from_sizes(&[1, 1, 1]).unwrap();
        let mask = build_mask(3, 0, &plan).unwrap();
        // Noisy rows of a 3-step plan each see clean tokens of earlier steps,
        // so isolate the first step, which sees only itself.
        let b = batch(&mut rng, 0, &plan, 8);
        let allowed = mask.allowed_columns();
        assert_eq!(allowed[2], vec![2]);
        let mut g = Graph::new();
        let vals = g.constant(Matrix::from_fn(5, 2, |r, c| (r * 2 + c) as f64));
        let scores = g.constant(Matrix::from_fn(5, 5, |r, c| (r + c) as f64));
        let a = g.masked_softmax(scores, Arc::new(allowed));
        let o = g.matmul(a, vals);
        assert_eq!(g.value(o).row(2), g.value(vals).row(2));
        assert!(p.cat_forward(&b, &mask, &sched()).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = CatParameters::<f64>::init(&small(), 9).unwrap();
        let mut c = Checkpoint::new();
        p.to_checkpoint(&mut c);
        let back = CatParameters::<f64>::from_checkpoint(&c).unwrap();
        assert_eq!(back.config(), p.config());
        for id in p.ids() {
            assert_eq!(back.tensor(id), p.tensor(id));
        }
        let mut bad = Checkpoint::new();
        p.to_checkpoint(&mut bad);
        bad.insert("cat.head.w", Matrix::zeros(2, 2));
        assert!(CatParameters::<f64>::from_checkpoint(&bad).is_err());
    }

    #[test]
    fn timestep_features_are_bounded_and_distinct() {
        let f: Matrix<f64> = timestep_features(&[1, 2, 1000], 8);
        assert!(f.as_slice().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(f.row(0), f.row(1));
        assert_eq!(f[(0, 1)], 1.0f64.cos());
    }
}
