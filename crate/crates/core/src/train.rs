//! Training: autoencoder warm-up, then the AR-blended noise-prediction
//! objective with Adam.
//!
//! Training runs in two stages. The first fits the ST encoder, the decoder
//! and the SC encoder (aligned to the ST latents) as an autoencoder, and fixes
//! a latent normalization. The second trains the transformer and the SC
//! encoder on noise prediction; the ST encoder and decoder join it only when
//! decoder training is enabled.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arplan::{generate_ar_steps, ARStepPlan, DEFAULT_AR_DECAY};
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{split_genes, ExpressionMatrix, SplitAssignment};
use crate::diffusion::{sample_timesteps, DiffusionSchedule, SamplingStrategy};
use crate::error::{Error, Result};
use crate::generate::{generate_genes, InferenceConfig};
use crate::granger;
use crate::mask::build_mask;
use crate::metrics::pcc;
use crate::model::{standard_normal, CatInputs, CatParameters, Head, ModelConfig, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Per-dimension shift and global scale mapping ST encoder outputs to the
/// space the diffusion runs in.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNorm<T> {
    pub shift: Matrix<T>,
    pub scale: T,
}

impl<T: Scalar> LatentNorm<T> {
    pub fn identity(d: usize) -> Self {
        LatentNorm {
            shift: Matrix::zeros(1, d),
            scale: T::one(),
        }
    }

    /// Column means and the root-mean-square deviation of `z`.
    pub fn fit(z: &Matrix<T>) -> Self {
        let (n, d) = z.shape();
        let mut shift = Matrix::zeros(1, d);
        for r in 0..n {
            for (s, &v) in shift.row_mut(0).iter_mut().zip(z.row(r)) {
                *s += v;
            }
        }
        let shift = shift.scale(T::one() / T::of_usize(n.max(1)));
        let mut ss = T::zero();
        for r in 0..n {
            for (&v, &m) in z.row(r).iter().zip(shift.row(0)) {
                ss += (v - m) * (v - m);
            }
        }
        let rms = (ss / T::of_usize((n * d).max(1))).sqrt();
        let scale = if rms > T::of(1e-8) { rms } else { T::one() };
        LatentNorm { shift, scale }
    }

    pub fn normalize(&self, z: &Matrix<T>) -> Matrix<T> {
        let inv = T::one() / self.scale;
        Matrix::from_fn(z.rows(), z.cols(), |r, c| {
            (z[(r, c)] - self.shift[(0, c)]) * inv
        })
    }

    pub fn denormalize(&self, z: &Matrix<T>) -> Matrix<T> {
        Matrix::from_fn(z.rows(), z.cols(), |r, c| {
            z[(r, c)] * self.scale + self.shift[(0, c)]
        })
    }
}

/// Order of gene tokens inside a training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneOrder {
    Random,
    /// Descending Granger out-degree F-statistic.
    Granger,
}

impl fmt::Display for GeneOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneOrder::Random => "random",
            GeneOrder::Granger => "granger",
        })
    }
}

impl FromStr for GeneOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(GeneOrder::Random),
            "granger" => Ok(GeneOrder::Granger),
            other => Err(Error::Config(format!(
                "gene order {other:?} is not random or granger"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_genes: usize,
    pub lr: f64,
    pub ar_decay: f64,
    pub train_decoder: bool,
    pub sampling: SamplingStrategy,
    pub seed: u64,
    /// Independent (plan, timestep, noise) draws averaged per update.
    pub n_t_samples: usize,
    pub ae_steps: usize,
    pub ae_lr: f64,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    /// Weight of the SC-to-ST latent alignment term.
    pub lambda_align: f64,
    pub grad_clip: f64,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// Reverse-diffusion grid used for validation.
    pub val_sampling: SamplingStrategy,
    pub gene_order: GeneOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_genes: 8,
            lr: 3e-3,
            ar_decay: DEFAULT_AR_DECAY,
            train_decoder: false,
            sampling: SamplingStrategy::Full,
            seed: 42,
            n_t_samples: 4,
            ae_steps: 1500,
            ae_lr: 1e-3,
            lambda_rec: 1.0,
            lambda_kl: 1e-4,
            lambda_align: 1.0,
            grad_clip: 1.0,
            val_every: 1,
            val_sampling: SamplingStrategy::Fractional(40),
            gene_order: GeneOrder::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.ae_lr > 0.0 && self.ae_lr.is_finite())
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.ar_decay > 0.0 && self.ar_decay <= 1.0) {
            return Err(Error::Config(format!(
                "ar.decay {} outside (0, 1]",
                self.ar_decay
            )));
        }
        if self.batch_genes == 0 || self.n_t_samples == 0 || self.val_every == 0 {
            return Err(Error::Config(
                "batch_genes, n_t_samples and val_every must be positive".into(),
            ));
        }
        if self.grad_clip.is_nan()
            || self.grad_clip <= 0.0
            || self.lambda_rec < 0.0
            || self.lambda_kl < 0.0
            || self.lambda_align < 0.0
        {
            return Err(Error::Config(
                "grad_clip must be positive, loss weights nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Aligned ST/SC matrices with a gene split.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub st: ExpressionMatrix<T>,
    pub sc: ExpressionMatrix<T>,
    pub split: SplitAssignment,
}

impl<T: Scalar> Dataset<T> {
    /// Requires identical gene ids in the same order; splits with `seed`.
    pub fn new(st: ExpressionMatrix<T>, sc: ExpressionMatrix<T>, seed: u64) -> Result<Self> {
        if st.gene_ids() != sc.gene_ids() {
            return Err(Error::shape("ST and SC gene ids differ; align them first"));
        }
        let idx: Vec<usize> = (0..st.n_genes()).collect();
        let split = split_genes(&idx, seed)?;
        Ok(Dataset { st, sc, split })
    }

    pub fn with_split(
        st: ExpressionMatrix<T>,
        sc: ExpressionMatrix<T>,
        split: SplitAssignment,
    ) -> Result<Self> {
        if st.gene_ids() != sc.gene_ids() {
            return Err(Error::shape("ST and SC gene ids differ; align them first"));
        }
        let n = st.n_genes();
        if split.train.is_empty()
            || split
                .train
                .iter()
                .chain(&split.val)
                .chain(&split.test)
                .any(|&g| g >= n)
        {
            return Err(Error::invalid(
                "split must name existing genes and a nonempty training set",
            ));
        }
        Ok(Dataset { st, sc, split })
    }

    pub fn gene_ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.st.gene_ids()[i].clone()).collect()
    }
}

/// Everything needed to generate: weights, latent normalization, the
/// diffusion schedule and training-time settings.
#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub params: CatParameters<T>,
    pub latent: LatentNorm<T>,
    pub schedule: DiffusionSchedule<T>,
    pub sampling: SamplingStrategy,
    pub batch_genes: usize,
    /// ST observation ids, used to label generated matrices.
    pub obs_ids: Vec<String>,
}

fn strategy_code(s: SamplingStrategy) -> f64 {
    match s {
        SamplingStrategy::Full => 0.0,
        SamplingStrategy::Fractional(n) => n as f64,
        SamplingStrategy::Adaptive => -1.0,
    }
}

fn strategy_from_code(c: f64) -> Result<SamplingStrategy> {
    match c {
        0.0 => Ok(SamplingStrategy::Full),
        -1.0 => Ok(SamplingStrategy::Adaptive),
        n if n >= 1.0 && n.fract() == 0.0 => Ok(SamplingStrategy::Fractional(n as usize)),
        _ => Err(Error::Checkpoint(format!("bad sampling code {c}"))),
    }
}

impl<T: Scalar> TrainedModel<T> {
    pub fn d_model(&self) -> usize {
        self.params.config().d_model
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.params.to_checkpoint(&mut c);
        c.insert("latent.shift", self.latent.shift.to_f64());
        c.insert_values("latent.scale", &[self.latent.scale.as_f64()]);
        let betas: Vec<f64> = self.schedule.betas().iter().map(|b| b.as_f64()).collect();
        c.insert_values("diffusion.betas", &betas);
        c.insert_values(
            "train.meta",
            &[strategy_code(self.sampling), self.batch_genes as f64],
        );
        let ids: Vec<f64> = self.obs_ids.join("\n").bytes().map(f64::from).collect();
        c.insert_values("meta.obs_ids", &ids);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let params = CatParameters::from_checkpoint(c)?;
        let d = params.config().d_model;
        let shift = c.require("latent.shift")?;
        if shift.shape() != (1, d) {
            return Err(Error::Checkpoint("latent.shift has the wrong shape".into()));
        }
        let scale = c
            .require("latent.scale")?
            .as_slice()
            .first()
            .copied()
            .unwrap_or(0.0);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Checkpoint("latent.scale must be positive".into()));
        }
        let schedule = DiffusionSchedule::from_betas(c.require("diffusion.betas")?.as_slice())?;
        let meta = c.require("train.meta")?.as_slice();
        if meta.len() != 2 {
            return Err(Error::Checkpoint("malformed train.meta".into()));
        }
        let bytes = c
            .require("meta.obs_ids")?
            .as_slice()
            .iter()
            .map(|&b| u8::try_from(b as i64).map_err(|_| Error::Checkpoint("bad id byte".into())))
            .collect::<Result<Vec<u8>>>()?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::Checkpoint("obs ids not UTF-8".into()))?;
        let obs_ids: Vec<String> = text.split('\n').map(str::to_string).collect();
        if obs_ids.len() != params.config().st_dim {
            return Err(Error::Checkpoint(
                "observation id count differs from st_dim".into(),
            ));
        }
        Ok(TrainedModel {
            params,
            latent: LatentNorm {
                shift: Matrix::from_f64(shift),
                scale: T::of(scale),
            },
            schedule,
            sampling: strategy_from_code(meta[0])?,
            batch_genes: (meta[1] as usize).max(1),
            obs_ids,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub clip: T,
    m: Vec<Option<Matrix<T>>>,
    v: Vec<Option<Matrix<T>>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, lr: f64, clip: f64) -> Self {
        Adam {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            clip: T::of(clip),
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    /// Applies one update; parameters without a gradient are untouched.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut CatParameters<T>, grads: &mut [Option<Matrix<T>>]) -> T {
        let norm = grads.iter().flatten().map(Matrix::sum_sq).sum::<T>().sqrt();
        let k = if norm > self.clip {
            self.clip / norm
        } else {
            T::one()
        };
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads[i].take() else { continue };
            let (rows, cols) = g.shape();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let p = params.tensor_mut(id);
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                let gi = gi * k;
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

/// Random draws defining one replicate of the training objective.
#[derive(Clone, Debug)]
pub struct ReplicateDraw<T> {
    pub plan: ARStepPlan,
    /// Timestep per sample token.
    pub timesteps: Vec<usize>,
    /// Diffusion noise (`s × d`).
    pub noise: Matrix<T>,
    /// Reparameterization noise for the variational ST encoder.
    pub enc_noise: Option<Matrix<T>>,
}

impl<T: Scalar> ReplicateDraw<T> {
    /// Plan from the AR decay, one timestep draw per AR step (the adaptive
    /// strategy spreads draws across steps), Gaussian noise.
    pub fn sample<R: Rng + ?Sized>(
        n_genes: usize,
        d: usize,
        variational: bool,
        schedule: &DiffusionSchedule<T>,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let plan = generate_ar_steps(n_genes, cfg.ar_decay, rng)?;
        let tp = sample_timesteps(schedule, cfg.sampling, plan.n_steps(), 1, cfg.ar_decay, rng)?;
        let timesteps = (0..n_genes)
            .map(|k| {
                let step = plan.step_of(k);
                let list = &tp.per_ar_step[step];
                list[(k - plan.boundaries()[step]) % list.len()]
            })
            .collect();
        let noise = standard_normal(n_genes, d, rng);
        let enc_noise = variational.then(|| standard_normal(n_genes, d, rng));
        Ok(ReplicateDraw {
            plan,
            timesteps,
            noise,
            enc_noise,
        })
    }
}

/// Which terms enter the loss and which parameter groups receive gradients.
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub train_decoder: bool,
    /// Stop gradients into the ST encoder from the noise-prediction and
    /// alignment terms.
    pub detach_targets: bool,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_align: f64,
}

impl LossOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossOptions {
            train_decoder: cfg.train_decoder,
            detach_targets: true,
            lambda_rec: cfg.lambda_rec,
            lambda_kl: cfg.lambda_kl,
            lambda_align: cfg.lambda_align,
        }
    }

    fn trainable(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Cat | ParamGroup::ScEncoder => true,
            ParamGroup::StEncoder | ParamGroup::Decoder => self.train_decoder,
        }
    }
}

/// Loss value and per-parameter gradients of one replicate.
pub struct ReplicateResult<T> {
    pub loss: T,
    pub noise_loss: T,
    pub grads: Vec<Option<Matrix<T>>>,
}

/// The objective on one batch of genes: `st` and `sc` hold one row per
/// gene, in token order. Condition tokens are the SC latents of the same
/// genes, so `c = s`.
pub fn replicate_loss<T: Scalar>(
    params: &CatParameters<T>,
    latent: &LatentNorm<T>,
    schedule: &DiffusionSchedule<T>,
    st: &Matrix<T>,
    sc: &Matrix<T>,
    draw: &ReplicateDraw<T>,
    opts: &LossOptions,
) -> Result<ReplicateResult<T>> {
    let n = st.rows();
    if sc.rows() != n || draw.plan.len() != n || draw.timesteps.len() != n {
        return Err(Error::shape(
            "batch, plan and timesteps disagree on gene count",
        ));
    }
    let d = params.config().d_model;
    let mut g = Graph::new();
    let b = params.bind(&mut g, |grp| opts.trainable(grp));

    let neg_shift = g.constant(latent.shift.scale(-T::one()));
    let inv_scale = T::one() / latent.scale;
    let st_in = g.constant_ref(st);
    let enc = params.encode_graph(&mut g, &b, Head::St, st_in, draw.enc_noise.as_ref())?;
    let shifted = g.add_row(enc.z, neg_shift);
    let x0 = g.scale(shifted, inv_scale);
    let x0 = if opts.detach_targets {
        g.detach(x0)
    } else {
        x0
    };

    let sc_in = g.constant_ref(sc);
    let sc_enc = params.encode_graph(&mut g, &b, Head::Sc, sc_in, None)?;
    let cond = g.add_row(sc_enc.mean, neg_shift);
    let cond = g.scale(cond, inv_scale);
    // With detached targets the SC encoder is steered by the alignment term
    // only; the noise loss at small t would otherwise swamp it.
    let cond = if opts.detach_targets {
        g.detach(cond)
    } else {
        cond
    };

    let mut a = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut alpha_bars = Vec::with_capacity(n);
    for &t in &draw.timesteps {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t);
        alpha_bars.push(ab);
        a.push(ab.sqrt());
        s.push((T::one() - ab).sqrt());
    }
    if draw.noise.shape() != (n, d) {
        return Err(Error::shape("diffusion noise shape"));
    }
    let signal = g.scale_rows(x0, a);
    let spread = g.constant(draw.noise.clone());
    let spread = g.scale_rows(spread, s);
    let noisy = g.add(signal, spread);
    let v = draw.plan.visible_len();
    // Clean tokens are the un-noised latents (timestep 0).
    let clean = g.slice_rows(x0, 0, v);
    debug_assert_eq!(g.value(clean), &g.value(x0).slice_rows(0, v));

    let mask = build_mask(n, n, &draw.plan)?;
    let inp = CatInputs {
        cond,
        clean,
        noisy,
        anchors: cond,
        timesteps: &draw.timesteps,
        alpha_bars: &alpha_bars,
        allowed: Arc::new(mask.allowed_columns()),
    };
    let eps_hat = params.cat_graph(&mut g, &b, &inp)?;
    let target = g.constant_ref(&draw.noise);
    let diff = g.sub(eps_hat, target);
    let noise_loss = g.mean_square(diff);
    let mut loss = noise_loss;
    if opts.lambda_align > 0.0 {
        let target = if opts.detach_targets {
            g.detach(enc.mean)
        } else {
            enc.mean
        };
        let gap = g.sub(sc_enc.mean, target);
        let align = g.mean_square(gap);
        let align = g.scale(align, T::of(opts.lambda_align));
        loss = g.add(loss, align);
    }
    if opts.train_decoder {
        let rec = params.decode_graph(&mut g, &b, enc.z)?;
        let err = g.sub(rec, st_in);
        let rec = g.mean_square(err);
        let rec = g.scale(rec, T::of(opts.lambda_rec));
        loss = g.add(loss, rec);
        if let Some(lv) = enc.logvar {
            let kl = g.kl_std_normal(enc.mean, lv);
            let kl = g.scale(kl, T::of(opts.lambda_kl));
            loss = g.add(loss, kl);
        }
    }
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            what: "non-finite training loss".into(),
            max_abs: g.max_abs_value(),
        });
    }
    let mut grads = g.backward(loss);
    let grads = b.vars().iter().map(|&v| grads.take(v)).collect();
    Ok(ReplicateResult {
        loss: value,
        noise_loss: g.scalar(noise_loss),
        grads,
    })
}

/// Optimizer state plus the fixed pieces of the objective.
pub struct Trainer<T> {
    pub params: CatParameters<T>,
    pub latent: LatentNorm<T>,
    pub schedule: DiffusionSchedule<T>,
    pub cfg: TrainConfig,
    adam: Adam<T>,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        params: CatParameters<T>,
        latent: LatentNorm<T>,
        schedule: DiffusionSchedule<T>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(params.len(), cfg.lr, cfg.grad_clip);
        Ok(Trainer {
            params,
            latent,
            schedule,
            cfg,
            adam,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer update on a batch (rows in token order). Replicates
    /// run in parallel; gradients are summed in replicate order so the
    /// result does not depend on scheduling.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        st: &Matrix<T>,
        sc: &Matrix<T>,
        rng: &mut R,
    ) -> Result<T> {
        let seeds: Vec<u64> = (0..self.cfg.n_t_samples).map(|_| rng.random()).collect();
        let opts = LossOptions::from_config(&self.cfg);
        let d = self.params.config().d_model;
        let variational = self.params.config().variational;
        let (params, latent, schedule, cfg) =
            (&self.params, &self.latent, &self.schedule, &self.cfg);
        let results: Vec<Result<ReplicateResult<T>>> = seeds
            .par_iter()
            .map(|&seed| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let draw = ReplicateDraw::sample(st.rows(), d, variational, schedule, cfg, &mut r)?;
                replicate_loss(params, latent, schedule, st, sc, &draw, &opts)
            })
            .collect();
        let k = T::one() / T::of_usize(seeds.len());
        let mut total = T::zero();
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.params.len()];
        for res in results {
            let res = res.map_err(|e| match e {
                Error::Numeric { what, max_abs, .. } => Error::Numeric {
                    step: self.step,
                    what,
                    max_abs,
                },
                other => other,
            })?;
            total += res.loss;
            for (acc, gr) in grads.iter_mut().zip(res.grads) {
                if let Some(gr) = gr {
                    match acc {
                        Some(a) => a.add_assign(&gr),
                        None => *acc = Some(gr),
                    }
                }
            }
        }
        for gr in grads.iter_mut().flatten() {
            *gr = gr.scale(k);
        }
        self.adam.step(&mut self.params, &mut grads);
        self.step += 1;
        if !self.params.is_finite() {
            return Err(Error::Numeric {
                step: self.step,
                what: "parameters became non-finite".into(),
                max_abs: f64::NAN,
            });
        }
        Ok(total * k)
    }

    pub fn into_model(self, batch_genes: usize, obs_ids: Vec<String>) -> TrainedModel<T> {
        TrainedModel {
            params: self.params,
            latent: self.latent,
            schedule: self.schedule,
            sampling: self.cfg.sampling,
            batch_genes,
            obs_ids,
        }
    }
}

/// Autoencoder warm-up on full batches: reconstruction through the ST
/// encoder and decoder, KL on the variational head, and regression of the
/// SC encoder onto the (fixed) ST latent means. Returns the final loss.
pub fn pretrain_autoencoder<T: Scalar, R: Rng + ?Sized>(
    params: &mut CatParameters<T>,
    st: &Matrix<T>,
    sc: &Matrix<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<T> {
    let mut adam = Adam::new(params.len(), cfg.ae_lr, cfg.grad_clip);
    let d = params.config().d_model;
    let variational = params.config().variational;
    let mut last = T::zero();
    for step in 0..cfg.ae_steps {
        let enc_noise = variational.then(|| standard_normal::<T, _>(st.rows(), d, rng));
        let (value, mut grads) = {
            let mut g = Graph::new();
            let b = params.bind(&mut g, |grp| grp != ParamGroup::Cat);
            let x = g.constant_ref(st);
            let enc = params.encode_graph(&mut g, &b, Head::St, x, enc_noise.as_ref())?;
            let rec = params.decode_graph(&mut g, &b, enc.z)?;
            let err = g.sub(rec, x);
            let mut loss = g.mean_square(err);
            if let Some(lv) = enc.logvar {
                let kl = g.kl_std_normal(enc.mean, lv);
                let kl = g.scale(kl, T::of(cfg.lambda_kl));
                loss = g.add(loss, kl);
            }
            let target = g.detach(enc.mean);
            let y = g.constant_ref(sc);
            let e2 = params.encode_graph(&mut g, &b, Head::Sc, y, None)?;
            let gap = g.sub(e2.mean, target);
            let align = g.mean_square(gap);
            let align = g.scale(align, T::of(cfg.lambda_align));
            loss = g.add(loss, align);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric {
                    step,
                    what: "non-finite autoencoder loss".into(),
                    max_abs: g.max_abs_value(),
                });
            }
            let mut gr = g.backward(loss);
            let grads: Vec<_> = b.vars().iter().map(|&v| gr.take(v)).collect();
            (value, grads)
        };
        adam.step(params, &mut grads);
        last = value;
        if step % 500 == 0 {
            debug!("autoencoder step {step}: loss {:.6}", value.as_f64());
        }
    }
    Ok(last)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when validation did not run this epoch.
    pub val_pcc: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_pcc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.10},{:.10}\n",
            r.epoch, r.train_loss, r.val_pcc
        ));
    }
    out
}

pub struct FitResult<T> {
    pub model: TrainedModel<T>,
    pub history: Vec<HistoryRow>,
    /// Epoch whose parameters were retained (0 = no validated epoch).
    pub best_epoch: usize,
}

/// Mean PCC between generated and observed ST profiles of `genes`;
/// a gene whose prediction is constant scores 0.
pub fn validation_pcc<T: Scalar>(
    model: &TrainedModel<T>,
    data: &Dataset<T>,
    genes: &[usize],
    inference: &InferenceConfig,
) -> Result<f64> {
    let ids = data.gene_ids(genes);
    let pred = generate_genes(&data.sc, &ids, model, inference)?;
    let mut total = 0.0;
    for (k, &gi) in genes.iter().enumerate() {
        total += pcc(pred.profile(k), data.st.profile(gi))
            .map(|v| v.as_f64())
            .unwrap_or(0.0);
    }
    Ok(total / genes.len().max(1) as f64)
}

fn rows_of<T: Scalar>(m: &ExpressionMatrix<T>, idx: &[usize]) -> Matrix<T> {
    m.values().select_rows(idx)
}

/// Full training run. With `epochs = 0` the initial parameters are returned
/// with an identity latent normalization and an empty history.
pub fn fit<T: Scalar>(
    data: &Dataset<T>,
    model_cfg: &ModelConfig,
    schedule: DiffusionSchedule<T>,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if model_cfg.st_dim != data.st.n_obs() || model_cfg.sc_dim != data.sc.n_obs() {
        return Err(Error::shape(format!(
            "model expects {}/{} observations, data has {}/{}",
            model_cfg.st_dim,
            model_cfg.sc_dim,
            data.st.n_obs(),
            data.sc.n_obs()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = CatParameters::init(model_cfg, rng.random())?;
    let obs_ids = data.st.obs_ids().to_vec();
    let batch_genes = cfg.batch_genes.min(data.split.train.len()).max(1);
    if cfg.epochs == 0 {
        let trainer = Trainer::new(
            params,
            LatentNorm::identity(model_cfg.d_model),
            schedule,
            cfg.clone(),
        )?;
        return Ok(FitResult {
            model: trainer.into_model(batch_genes, obs_ids),
            history: Vec::new(),
            best_epoch: 0,
        });
    }

    let train = &data.split.train;
    let st_train = rows_of(&data.st, train);
    let sc_train = rows_of(&data.sc, train);
    let ae_loss = pretrain_autoencoder(&mut params, &st_train, &sc_train, cfg, &mut rng)?;
    info!("autoencoder warm-up done: loss {:.6}", ae_loss.as_f64());
    let means = params.encode(&st_train, Head::St, None)?.mean;
    let latent = LatentNorm::fit(&means);

    let rank: Option<Vec<usize>> = match cfg.gene_order {
        GeneOrder::Random => None,
        GeneOrder::Granger => {
            let order = granger::order_by_out_degree(&data.st, granger::DEFAULT_LAG)?;
            let mut rank = vec![0; order.len()];
            for (pos, &gi) in order.iter().enumerate() {
                rank[gi] = pos;
            }
            Some(rank)
        }
    };

    let mut trainer = Trainer::new(params, latent, schedule, cfg.clone())?;
    let inference = InferenceConfig {
        strategy: cfg.val_sampling,
        ar_groups: 1,
        seed: cfg.seed,
        chunk_genes: batch_genes,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, CatParameters<T>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(batch_genes) {
            let mut genes = chunk.to_vec();
            if let Some(rank) = &rank {
                genes.sort_by_key(|&g| rank[g]);
            }
            let st = rows_of(&data.st, &genes);
            let sc = rows_of(&data.sc, &genes);
            loss_sum += trainer.train_step(&st, &sc, &mut rng)?.as_f64();
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let validate =
            !data.split.val.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs);
        let val_pcc = if validate {
            let snapshot = TrainedModel {
                params: trainer.params.clone(),
                latent: trainer.latent.clone(),
                schedule: trainer.schedule.clone(),
                sampling: cfg.sampling,
                batch_genes,
                obs_ids: obs_ids.clone(),
            };
            let v = validation_pcc(&snapshot, data, &data.split.val, &inference)?;
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, snapshot.params));
            }
            v
        } else {
            f64::NAN
        };
        debug!("epoch {epoch}: loss {train_loss:.6} val_pcc {val_pcc:.4}");
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_pcc,
        });
    }
    let best_epoch = match best {
        Some((v, epoch, params)) => {
            info!("retaining epoch {epoch} (validation PCC {v:.4})");
            trainer.params = params;
            epoch
        }
        None => 0,
    };
    Ok(FitResult {
        model: trainer.into_model(batch_genes, obs_ids),
        history,
        best_epoch,
    })
}
