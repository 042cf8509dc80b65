//! End-to-end training and generation on small synthetic data.

use catgen_core::data::SplitAssignment;
use catgen_core::metrics::pcc;
use catgen_core::synth::{self, SynthConfig};
use catgen_core::train::{replicate_loss, LatentNorm, LossOptions, ReplicateDraw, Trainer};
use catgen_core::{
    fit, generate_genes, CatParameters, Dataset, DiffusionSchedule, InferenceConfig, ModelConfig,
    SamplingStrategy, TrainConfig, TrainedModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(p: usize, q: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        hidden: 64,
        blocks: 2,
        ..ModelConfig::new(p, q)
    }
}

/// The objective is heavy-tailed in t, so progress is measured with common
/// random numbers: a fixed set of draws evaluated every 20 steps.
#[test]
fn objective_decreases_on_a_fixed_batch() {
    let syn = synth::generate::<f64>(&SynthConfig::planted_chains(8, 12, 24, 2, 4, 3)).unwrap();
    let st = syn.st.values().clone();
    let sc = syn.sc.values().clone();
    let cfg = TrainConfig::default();
    let params = CatParameters::init(&small_model(12, 24), 5).unwrap();
    let d = params.config().d_model;
    let schedule = DiffusionSchedule::linear(2000, 1e-4, 2e-2).unwrap();
    let mut draw_rng = ChaCha8Rng::seed_from_u64(77);
    let draws: Vec<ReplicateDraw<f64>> = (0..32)
        .map(|_| {
            ReplicateDraw::sample(
                8,
                d,
                params.config().variational,
                &schedule,
                &cfg,
                &mut draw_rng,
            )
            .unwrap()
        })
        .collect();
    let opts = LossOptions::from_config(&cfg);
    let mut trainer = Trainer::new(params, LatentNorm::identity(d), schedule.clone(), cfg).unwrap();
    let objective = |t: &Trainer<f64>| -> f64 {
        draws
            .iter()
            .map(|d| {
                replicate_loss(&t.params, &t.latent, &schedule, &st, &sc, d, &opts)
                    .unwrap()
                    .loss
            })
            .sum::<f64>()
            / draws.len() as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut values = vec![objective(&trainer)];
    for _ in 0..5 {
        for _ in 0..20 {
            trainer.train_step(&st, &sc, &mut rng).unwrap();
        }
        values.push(objective(&trainer));
    }
    assert_eq!(trainer.steps_taken(), 100);
    for w in values.windows(2) {
        assert!(w[1] < w[0], "objective not decreasing: {values:?}");
    }
}

#[test]
fn four_gene_toy_is_reproduced() {
    let syn = synth::generate::<f64>(&SynthConfig::planted_chains(4, 12, 24, 1, 4, 1)).unwrap();
    let all = vec![0, 1, 2, 3];
    let split = SplitAssignment {
        train: all.clone(),
        val: all.clone(),
        test: vec![],
    };
    let data = Dataset::with_split(syn.st, syn.sc, split).unwrap();
    let cfg = TrainConfig {
        epochs: 150,
        val_every: 10,
        ..TrainConfig::default()
    };
    let schedule = DiffusionSchedule::linear(2000, 1e-4, 2e-2).unwrap();
    let res = fit(&data, &small_model(12, 24), schedule, &cfg).unwrap();
    let inf = InferenceConfig {
        strategy: SamplingStrategy::Fractional(20),
        ..InferenceConfig::default()
    };
    let ids = data.gene_ids(&all);
    let pred = generate_genes(&data.sc, &ids, &res.model, &inf).unwrap();
    let mean: f64 = all
        .iter()
        .map(|&g| pcc(pred.profile(g), data.st.profile(g)).unwrap_or(0.0))
        .sum::<f64>()
        / 4.0;
    assert!(mean >= 0.95, "toy PCC {mean}");
}

#[test]
fn checkpointed_model_generates_identically() {
    let syn = synth::generate::<f64>(&SynthConfig::planted_chains(12, 10, 20, 2, 3, 8)).unwrap();
    let data = Dataset::new(syn.st, syn.sc, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ae_steps: 30,
        ..TrainConfig::default()
    };
    let schedule = DiffusionSchedule::linear(100, 1e-4, 2e-2).unwrap();
    let res = fit(&data, &small_model(10, 20), schedule, &cfg).unwrap();
    assert_eq!(res.history.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.catg");
    res.model.save(&path).unwrap();
    let loaded = TrainedModel::<f64>::load(&path).unwrap();

    let ids = data.gene_ids(&[0, 5, 11, 2, 7]);
    let inf = InferenceConfig {
        ar_groups: 2,
        chunk_genes: 3,
        ..InferenceConfig::default()
    };
    let a = generate_genes(&data.sc, &ids, &res.model, &inf).unwrap();
    let b = generate_genes(&data.sc, &ids, &loaded, &inf).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(a.values().shape(), (5, 10));
    assert_eq!(a.obs_ids(), data.st.obs_ids());
    assert!(a
        .values()
        .as_slice()
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0));

    let other =
        generate_genes(&data.sc, &ids, &loaded, &InferenceConfig { seed: 1, ..inf }).unwrap();
    assert_ne!(a.values(), other.values());
}

#[test]
fn single_precision_pipeline_runs() {
    let syn = synth::generate::<f32>(&SynthConfig::planted_chains(12, 8, 16, 2, 3, 4)).unwrap();
    let data = Dataset::new(syn.st, syn.sc, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ae_steps: 20,
        ..TrainConfig::default()
    };
    let schedule = DiffusionSchedule::<f32>::linear(50, 1e-4, 2e-2).unwrap();
    let res = fit(&data, &small_model(8, 16), schedule, &cfg).unwrap();
    let ids = data.gene_ids(&data.split.test);
    let pred = generate_genes(&data.sc, &ids, &res.model, &InferenceConfig::default()).unwrap();
    assert!(pred.values().as_slice().iter().all(|v| v.is_finite()));
}
