//! Reverse diffusion in latent space conditioned on SC latents, followed by
//! decoding to ST feature space.
//!
//! Target genes are processed in chunks (the training batch size by
//! default). Inside a chunk the genes form equal-width AR groups; each group
//! is fully denoised before its latents join the sequence as clean context
//! for the next group.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arplan::ARStepPlan;
use crate::autodiff::Graph;
use crate::data::{ExpressionMatrix, Modality};
use crate::diffusion::{candidate_timesteps, DiffusionSchedule, SamplingStrategy};
use crate::error::{Error, Result};
use crate::mask::build_mask;
use crate::model::{standard_normal, CatInputs, CatParameters, Head};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::train::TrainedModel;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    /// Timestep grid: `full` and `adaptive` walk every step, `frac:n` every
    /// n-th step anchored at T.
    pub strategy: SamplingStrategy,
    pub ar_groups: usize,
    pub seed: u64,
    /// Genes per generated sequence; 0 uses the model's training batch size.
    pub chunk_genes: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            strategy: SamplingStrategy::Full,
            ar_groups: 1,
            seed: 42,
            chunk_genes: 0,
        }
    }
}

/// One posterior step from `t` to `t − 1`. `z` is ignored at `t = 1`.
pub fn reverse_step<T: Scalar>(
    xt: &[T],
    t: usize,
    eps_hat: &[T],
    schedule: &DiffusionSchedule<T>,
    z: &[T],
) -> Result<Vec<T>> {
    reverse_step_to(xt, t, t - usize::from(t > 0), eps_hat, schedule, z)
}

/// Posterior step from `t` directly to `t_prev < t`, treating the skipped
/// transitions as one with `ᾱ_t / ᾱ_{t_prev}`. No noise is added when
/// `t_prev = 0`. Zero-variance transitions leave `x_t` unchanged.
pub fn reverse_step_to<T: Scalar>(
    xt: &[T],
    t: usize,
    t_prev: usize,
    eps_hat: &[T],
    schedule: &DiffusionSchedule<T>,
    z: &[T],
) -> Result<Vec<T>> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "reverse step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if xt.len() != eps_hat.len() || (t_prev > 0 && z.len() != xt.len()) {
        return Err(Error::shape("reverse step vectors differ in length"));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let alpha = ab_t / ab_p;
    let beta = T::one() - alpha;
    let one_minus = T::one() - ab_t;
    let coef = if beta == T::zero() {
        T::zero()
    } else {
        beta / one_minus.sqrt()
    };
    let inv_sqrt_alpha = T::one() / alpha.sqrt();
    let sd = if t_prev == 0 || one_minus == T::zero() {
        T::zero()
    } else {
        (beta * (T::one() - ab_p) / one_minus).sqrt()
    };
    Ok(xt
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (&x, &e))| {
            let mu = (x - coef * e) * inv_sqrt_alpha;
            if sd == T::zero() {
                mu
            } else {
                mu + sd * z[i]
            }
        })
        .collect())
}

/// Descending timesteps visited at inference.
pub fn inference_grid(steps: usize, strategy: SamplingStrategy) -> Result<Vec<usize>> {
    let mut grid = candidate_timesteps(steps, strategy)?;
    grid.reverse();
    Ok(grid)
}

/// Mixes a base seed with chunk and group indices (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, chunk: usize, group: usize) -> u64 {
    let mut x = seed
        ^ (chunk as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (group as u64)
            .wrapping_add(1)
            .wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn predict_noise<T: Scalar>(
    params: &CatParameters<T>,
    schedule: &DiffusionSchedule<T>,
    cond: &Matrix<T>,
    clean: &Matrix<T>,
    noisy: &Matrix<T>,
    timesteps: &[usize],
    allowed: &Arc<Vec<Vec<usize>>>,
) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let c = g.constant_ref(cond);
    let anchors = g.constant(cond.slice_rows(0, noisy.rows()));
    let clean = g.constant_ref(clean);
    let noisy = g.constant_ref(noisy);
    let alpha_bars: Vec<T> = timesteps.iter().map(|&t| schedule.alpha_bar(t)).collect();
    let inp = CatInputs {
        cond: c,
        clean,
        noisy,
        anchors,
        timesteps,
        alpha_bars: &alpha_bars,
        allowed: allowed.clone(),
    };
    let out = params.cat_graph(&mut g, &b, &inp)?;
    let v = g.value(out);
    if !v.is_finite() {
        return Err(Error::Numeric {
            step: timesteps.first().copied().unwrap_or(0),
            what: "non-finite noise prediction".into(),
            max_abs: g.max_abs_value(),
        });
    }
    Ok(v.clone())
}

/// Generates normalized latents for one chunk. `cond` holds the normalized
/// SC latents of the chunk's genes (one row each, also used as anchors);
/// group `i` draws all its randomness from `seeds[i]`.
pub fn generate_latents<T: Scalar>(
    params: &CatParameters<T>,
    schedule: &DiffusionSchedule<T>,
    cond: &Matrix<T>,
    plan: &ARStepPlan,
    seeds: &[u64],
    grid: &[usize],
) -> Result<Matrix<T>> {
    let n = cond.rows();
    let d = params.config().d_model;
    if plan.len() != n || seeds.len() != plan.n_steps() {
        return Err(Error::shape("plan, seeds and condition rows disagree"));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(
            "timestep grid must be nonempty and strictly descending",
        ));
    }
    let mut done = Matrix::zeros(0, d);
    for (gi, &seed) in seeds.iter().enumerate() {
        let range = plan.step_range(gi);
        let sub = ARStepPlan::from_sizes(&plan.sizes()[..=gi])?;
        let mask = build_mask(range.end, n, &sub)?;
        let allowed = Arc::new(mask.allowed_columns());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Matrix<T> = standard_normal(range.len(), d, &mut rng);
        for (k, &t) in grid.iter().enumerate() {
            let t_prev = grid.get(k + 1).copied().unwrap_or(0);
            let noisy = Matrix::vstack(&[&done, &x]);
            let ts = vec![t; range.end];
            let eps = predict_noise(params, schedule, cond, &done, &noisy, &ts, &allowed)?;
            let z: Matrix<T> = if t_prev > 0 {
                standard_normal(x.rows(), d, &mut rng)
            } else {
                Matrix::zeros(x.rows(), d)
            };
            let eps_g = eps.slice_rows(range.start, range.end);
            let next = reverse_step_to(
                x.as_slice(),
                t,
                t_prev,
                eps_g.as_slice(),
                schedule,
                z.as_slice(),
            )?;
            x = Matrix::from_vec(x.rows(), d, next);
        }
        done = Matrix::vstack(&[&done, &x]);
    }
    Ok(done)
}

/// Predicted ST matrix for `target_genes` from their SC profiles.
pub fn generate_genes<T: Scalar>(
    sc: &ExpressionMatrix<T>,
    target_genes: &[String],
    model: &TrainedModel<T>,
    cfg: &InferenceConfig,
) -> Result<ExpressionMatrix<T>> {
    generate_with_latents(sc, target_genes, model, cfg).map(|g| g.expression)
}

#[derive(Clone, Debug)]
pub struct Generated<T> {
    pub expression: ExpressionMatrix<T>,
    /// Final latents in encoder space, one row per target gene.
    pub latents: Matrix<T>,
    /// SC-derived condition latents in encoder space.
    pub conditions: Matrix<T>,
}

/// As [`generate_genes`], also returning the latent embeddings.
pub fn generate_with_latents<T: Scalar>(
    sc: &ExpressionMatrix<T>,
    target_genes: &[String],
    model: &TrainedModel<T>,
    cfg: &InferenceConfig,
) -> Result<Generated<T>> {
    let params = &model.params;
    if sc.n_obs() != params.config().sc_dim {
        return Err(Error::shape(format!(
            "SC matrix has {} observations, model expects {}",
            sc.n_obs(),
            params.config().sc_dim
        )));
    }
    if target_genes.is_empty() {
        return Err(Error::invalid("no target genes"));
    }
    let idx = target_genes
        .iter()
        .map(|g| {
            sc.gene_index(g)
                .ok_or_else(|| Error::UnknownGene(g.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = inference_grid(model.schedule.steps(), cfg.strategy)?;
    let sc_rows = sc.values().select_rows(&idx);
    let conditions = params.encode(&sc_rows, Head::Sc, None)?.mean;
    let cond = model.latent.normalize(&conditions);
    let chunk = if cfg.chunk_genes == 0 {
        model.batch_genes
    } else {
        cfg.chunk_genes
    };
    let mut latents = Vec::new();
    for (ci, start) in (0..idx.len()).step_by(chunk.max(1)).enumerate() {
        let end = (start + chunk).min(idx.len());
        let c = cond.slice_rows(start, end);
        let plan = ARStepPlan::equal_groups(end - start, cfg.ar_groups)?;
        let seeds: Vec<u64> = (0..plan.n_steps())
            .map(|g| derive_seed(cfg.seed, ci, g))
            .collect();
        latents.push(generate_latents(
            params,
            &model.schedule,
            &c,
            &plan,
            &seeds,
            &grid,
        )?);
    }
    let parts: Vec<&Matrix<T>> = latents.iter().collect();
    let z = model.latent.denormalize(&Matrix::vstack(&parts));
    let decoded = params.decode(&z)?.map(|v| v.max(T::zero()));
    let expression = ExpressionMatrix::new(
        target_genes.to_vec(),
        model.obs_ids.clone(),
        decoded,
        Modality::St,
    )?;
    Ok(Generated {
        expression,
        latents: z,
        conditions,
    })
}
