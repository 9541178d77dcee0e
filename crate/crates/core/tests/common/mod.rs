#![allow(dead_code)]

use motionrag::autograd::Mat;
use motionrag::cama::{ContextExample, MctConfig, MotionContextTransformer, Pairing};
use motionrag::generator::{Generator, GeneratorConfig, ImageCondition};
use motionrag::params::ParamSet;
use motionrag::resampler::{Resampler, ResamplerConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: (usize, usize), scale: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_simple_fn(shape, || {
        scale * Distribution::<f64>::sample(&StandardNormal, rng)
    })
}

/// Worst relative error, over parameter tensors, between `analytic` and
/// central differences of `loss`. Per tensor the error is
/// `‖a − n‖ / max(‖a‖, ‖n‖)`; tensors whose gradient is zero on both sides
/// count as exact.
pub fn finite_difference_error<M>(
    model: &mut M,
    set: fn(&mut M) -> &mut ParamSet,
    analytic: &[Mat],
    loss: impl Fn(&M) -> f64,
) -> (f64, String) {
    let count = set(model).len();
    assert_eq!(count, analytic.len(), "one gradient per parameter");
    let mut worst = (0.0, String::new());
    for (slot, expected) in analytic.iter().enumerate() {
        let shape = set(model).get(slot).dim();
        let mut numeric = Mat::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = set(model).get(slot)[[r, c]];
                set(model).get_mut(slot)[[r, c]] = orig + FD_STEP;
                let up = loss(model);
                set(model).get_mut(slot)[[r, c]] = orig - FD_STEP;
                let down = loss(model);
                set(model).get_mut(slot)[[r, c]] = orig;
                numeric[[r, c]] = (up - down) / (2.0 * FD_STEP);
            }
        }
        let norm = |m: &Mat| m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&(expected - &numeric));
        let scale = norm(expected).max(norm(&numeric));
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, set(model).name(slot).to_string());
        }
    }
    worst
}

pub fn tiny_resampler_config() -> ResamplerConfig {
    ResamplerConfig {
        tokens: 2,
        width: 4,
        input_dim: 5,
        layers: 2,
        heads: 2,
        ff_dim: 6,
    }
}

/// Resampler finite-difference check on `N = 3` inputs.
pub fn resampler_gradient_error(seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let mut model = Resampler::new(tiny_resampler_config(), &mut r);
    perturb_all(model.params_mut(), 0.3, &mut r);
    let inputs = gaussian((3, 5), 1.0, &mut r);
    let upstream = gaussian((2, 4), 1.0, &mut r);
    let analytic = model.gradients(&inputs, &upstream).unwrap();
    finite_difference_error(&mut model, Resampler::params_mut, &analytic, |m| {
        let out = m.resample(&inputs).unwrap();
        out.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
    })
}

pub fn tiny_mct_config() -> MctConfig {
    MctConfig {
        tokens: 2,
        width: 4,
        layers: 2,
        heads: 2,
        ff_dim: 6,
        max_seq_len: 16,
        pairing: Pairing::Shifted,
        aux_weight: 0.0,
    }
}

pub fn context_examples(
    k: usize,
    shape: (usize, usize),
    rng: &mut impl Rng,
) -> Vec<ContextExample> {
    (1..=k)
        .map(|rank| ContextExample {
            appearance: gaussian(shape, 1.0, rng),
            motion: gaussian(shape, 1.0, rng),
            rank,
        })
        .collect()
}

/// MCT finite-difference check with two examples, so the null motion block
/// and the output head both sit on the loss path.
pub fn mct_gradient_error(seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let cfg = tiny_mct_config();
    let mut model = MotionContextTransformer::new(cfg, &mut r);
    perturb_all(model.params_mut(), 0.3, &mut r);
    let shape = (cfg.tokens, cfg.width);
    let examples = context_examples(2, shape, &mut r);
    let target_app = gaussian(shape, 1.0, &mut r);
    let target = gaussian(shape, 1.0, &mut r);
    let analytic = model.gradients(&examples, &target_app, &target).unwrap();
    let null = model.null_motion_slot();
    assert!(
        analytic.params[null].iter().any(|g| g.abs() > 1e-8),
        "null block must receive gradient"
    );
    finite_difference_error(
        &mut model,
        MotionContextTransformer::params_mut,
        &analytic.params,
        |m| {
            motionrag::cama::transfer_loss(&m.adapt(&examples, &target_app).unwrap(), &target)
                .unwrap()
        },
    )
}

pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        frames: 2,
        height: 4,
        width: 4,
        patch: 2,
        hidden: 4,
        blocks: 2,
        heads: 2,
        ff_dim: 6,
        image_dim: 3,
        motion_dim: 4,
        adapter_dim: 4,
        adapter_heads: 2,
        adapter_scale: 1.0,
        diffusion_steps: 4,
        beta_start: 0.05,
        beta_end: 0.3,
        reference_steps: 4,
        sample_steps: 2,
    }
}

pub struct GeneratorCase {
    pub generator: Generator,
    pub x0: Mat,
    pub noise: Mat,
    pub cond: ImageCondition,
    pub motion: Mat,
    pub t: usize,
}

/// Tiny generator whose adapter output projections are nonzero, so every
/// parameter sits on the loss path.
pub fn generator_case(seed: u64) -> GeneratorCase {
    let mut r = rng(seed);
    let cfg = tiny_generator_config();
    let mut generator = Generator::new(cfg, &mut r).unwrap();
    perturb_all(generator.denoiser_params_mut(), 0.3, &mut r);
    perturb_all(generator.adapter_params_mut(), 0.3, &mut r);
    let shape = (cfg.token_count(), cfg.patch_dim());
    let frame = Mat::from_shape_simple_fn((cfg.height * cfg.width, 3), || r.random_range(0.0..1.0))
        .into_shape_with_order((cfg.height, cfg.width, 3))
        .unwrap();
    GeneratorCase {
        x0: Mat::from_shape_simple_fn(shape, || r.random_range(0.0..1.0)),
        noise: gaussian(shape, 1.0, &mut r),
        cond: ImageCondition {
            frame,
            features: gaussian((5, cfg.image_dim), 1.0, &mut r),
        },
        motion: gaussian((3, cfg.motion_dim), 1.0, &mut r),
        t: 2,
        generator,
    }
}

pub fn denoiser_gradient_error(seed: u64) -> (f64, String) {
    let mut c = generator_case(seed);
    let g = c
        .generator
        .gradients(&c.x0, c.t, &c.noise, &c.cond, Some(&c.motion))
        .unwrap();
    let (x0, noise, cond, motion, t) = (
        c.x0.clone(),
        c.noise.clone(),
        c.cond.clone(),
        c.motion.clone(),
        c.t,
    );
    finite_difference_error(
        &mut c.generator,
        Generator::denoiser_params_mut,
        &g.denoiser,
        |m| m.loss(&x0, t, &noise, &cond, Some(&motion)).unwrap(),
    )
}

pub fn adapter_gradient_error(seed: u64) -> (f64, String) {
    let mut c = generator_case(seed);
    let g = c
        .generator
        .gradients(&c.x0, c.t, &c.noise, &c.cond, Some(&c.motion))
        .unwrap();
    let (x0, noise, cond, motion, t) = (
        c.x0.clone(),
        c.noise.clone(),
        c.cond.clone(),
        c.motion.clone(),
        c.t,
    );
    finite_difference_error(
        &mut c.generator,
        Generator::adapter_params_mut,
        &g.adapters,
        |m| m.loss(&x0, t, &noise, &cond, Some(&motion)).unwrap(),
    )
}

/// Adds Gaussian noise to every parameter so that zero-initialised entries
/// (biases, adapter output projections) do not hide gradient paths.
pub fn perturb_all(set: &mut ParamSet, scale: f64, rng: &mut impl Rng) {
    for m in set.values_mut() {
        m.mapv_inplace(|v| v + scale * Distribution::<f64>::sample(&StandardNormal, rng));
    }
}

use motionrag::retrieval::{Embedding, RetrievalIndex, RetrievalRecord};

/// Database of small-integer embeddings; duplicates are frequent, so exact
/// similarity ties occur.
pub fn random_database(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<RetrievalRecord> {
    let pool: Vec<Vec<f32>> = (0..(n / 3).max(1))
        .map(|_| (0..dim).map(|_| rng.random_range(-1..=2) as f32).collect())
        .collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    ids.into_iter()
        .map(|i| RetrievalRecord {
            id: format!("r{i:04}"),
            caption: String::new(),
            embedding: Embedding {
                values: pool[rng.random_range(0..pool.len())].clone(),
            },
        })
        .collect()
}

/// Sort every record by descending cosine similarity, then ascending id.
pub fn brute_force_top_k(
    records: &[RetrievalRecord],
    query: &[f32],
    k: usize,
) -> Vec<(String, f64)> {
    let norm = |v: &[f32]| {
        v.iter()
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt()
    };
    let qn = norm(query);
    let mut all: Vec<(String, f64)> = records
        .iter()
        .map(|r| {
            let dot: f64 = r
                .embedding
                .values
                .iter()
                .zip(query)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            let denom = qn * norm(&r.embedding.values);
            (r.id.clone(), if denom == 0.0 { 0.0 } else { dot / denom })
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Runs one randomized comparison; returns whether the index agreed.
pub fn retrieval_matches_oracle(rng: &mut impl Rng, max_records: usize) -> bool {
    let n = rng.random_range(1..=max_records);
    let dim = rng.random_range(1..=8);
    let records = random_database(n, dim, rng);
    let index = RetrievalIndex::build(records.clone()).unwrap();
    let query: Vec<f32> = (0..dim).map(|_| rng.random_range(-1..=2) as f32).collect();
    let k = rng.random_range(1..=n.min(20));
    let got: Vec<(String, f64)> = index
        .search(
            &Embedding {
                values: query.clone(),
            },
            k,
            None,
        )
        .unwrap()
        .into_iter()
        .map(|h| (h.record.id, h.similarity))
        .collect();
    got == brute_force_top_k(&records, &query, k)
}

use motionrag::corpus::{synthesize_video, RenderDims};
use motionrag::encoders::Encoders;
use motionrag::pipeline::{
    FeatureStore, MotionRag, RunConfig, Stage1Trainer, Stage2Trainer, Workspace,
};

/// Default configuration shrunk for quick end-to-end runs.
pub fn quick_config(stage1_steps: usize, stage2_steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.stage1.steps = stage1_steps;
    cfg.stage1.min_corpus = 10;
    cfg.stage1.batch = 2;
    cfg.stage2.steps = stage2_steps;
    cfg.stage2.batch = 2;
    cfg.eval.max_videos = 4;
    cfg.eval.sample_steps = 2;
    cfg
}

pub fn in_memory_workspace(cfg: &RunConfig, n: usize, seed: u64) -> Workspace {
    let dims = RenderDims::default();
    let videos: Vec<_> = (0..n)
        .map(|i| synthesize_video(seed, i, dims).unwrap())
        .collect();
    let store =
        FeatureStore::from_videos(&videos, &Encoders::new(&cfg.encoder), cfg.generator.patch)
            .unwrap();
    Workspace::from_store(cfg, dims, store).unwrap()
}

pub struct QuickSystem {
    pub workspace: Workspace,
    pub stage1: Stage1Trainer,
    pub stage2: Stage2Trainer,
    pub rag: MotionRag,
}

pub fn quick_system(cfg: &RunConfig, n: usize) -> QuickSystem {
    let ws = in_memory_workspace(cfg, n, 1);
    let stage1 = ws.train_stage1(|_, _| {}).unwrap();
    let index = ws.training_index().unwrap();
    let (stage2, _) = ws.train_stage2(&stage1.model, &index, |_, _| {}).unwrap();
    let rag = ws
        .system(stage1.model.clone(), Some(stage2.model.clone()), index)
        .unwrap();
    QuickSystem {
        workspace: ws,
        stage1,
        stage2,
        rag,
    }
}
