//! Stage 1: denoiser, Motion-Adapters and motion resampler trained jointly
//! on ground-truth motion tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Mat};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::optim::Adam;
use crate::params::{accumulate, ParamSet};
use crate::resampler::Resampler;

use super::config::RunConfig;
use super::features::{FeatureStore, VideoFeatures};

pub const STAGE1_KIND: &str = "stage1";
const DATA_SALT: u64 = 0x5747_4531;

/// The generator together with the motion resampler that feeds it.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub generator: Generator,
    pub motion_resampler: Resampler,
}

impl Stage1Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(cfg.generator, &mut rng)?;
        let motion_resampler = Resampler::new(cfg.motion_resampler, &mut rng);
        Ok(Self {
            generator,
            motion_resampler,
        })
    }

    /// `f_m(V)` for a video's dense features.
    pub fn motion_tokens(&self, video: &VideoFeatures) -> Result<Mat> {
        self.motion_resampler.resample(&video.video)
    }

    fn groups(&self) -> [&ParamSet; 3] {
        [
            self.generator.denoiser().params(),
            self.generator.adapters().params(),
            self.motion_resampler.params(),
        ]
    }

    /// SHA-256 over all stage-1 parameters.
    pub fn digest(&self) -> [u8; 32] {
        let mut all = ParamSet::new();
        for (g, set) in ["denoiser", "adapters", "motion_resampler"]
            .iter()
            .zip(self.groups())
        {
            for (name, value) in set.iter() {
                all.add(format!("{g}.{name}"), value.clone());
            }
        }
        all.digest()
    }

    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(STAGE1_KIND)?;
        let generator = Generator::from_params(
            cfg.generator,
            ckpt.group("denoiser")?.clone(),
            ckpt.group("adapters")?.clone(),
        )?;
        let motion_resampler = Resampler::from_params(
            cfg.motion_resampler,
            ckpt.group("motion_resampler")?.clone(),
        )?;
        Ok(Self {
            generator,
            motion_resampler,
        })
    }

    /// Loss of one sample and, when `grads` is given, its gradients added in.
    fn sample_loss(
        &self,
        video: &VideoFeatures,
        t: usize,
        noise: &Mat,
        with_motion: bool,
        grads: Option<&mut [Vec<Mat>; 3]>,
    ) -> Result<f64> {
        let trainable = grads.is_some();
        let mut g = Graph::new();
        let pd = self.generator.denoiser().params().bind(&mut g, trainable);
        let pa = self.generator.adapters().params().bind(&mut g, trainable);
        let pr = self.motion_resampler.params().bind(&mut g, trainable);
        let motion = if with_motion {
            let feats = g.constant(video.video.clone());
            Some(self.motion_resampler.forward(&mut g, &pr, feats))
        } else {
            None
        };
        let x_t = self.generator.schedule().diffuse(&video.tokens, t, noise)?;
        let x = g.constant(x_t);
        let out = self
            .generator
            .forward(&mut g, &pd, &pa, x, t, &video.condition(), motion)?;
        let target = g.constant(video.tokens.clone());
        let loss = g.mse(out, target);
        if let Some(acc) = grads {
            let gr = g.backward(loss);
            accumulate(
                &mut acc[0],
                &self.generator.denoiser().params().gradients(&gr, &pd),
            );
            accumulate(
                &mut acc[1],
                &self.generator.adapters().params().gradients(&gr, &pa),
            );
            accumulate(
                &mut acc[2],
                &self.motion_resampler.params().gradients(&gr, &pr),
            );
        }
        Ok(g.scalar(loss))
    }
}

/// One drawn training sample.
#[derive(Clone, Debug)]
struct Draw {
    video: usize,
    t: usize,
    noise: Mat,
    with_motion: bool,
}

/// Resumable stage-1 optimisation. Step `n` draws its batch from an RNG keyed
/// by `(seed, n)`, so a restored trainer continues exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Stage1Trainer {
    pub model: Stage1Model,
    pub config: RunConfig,
    adam: Adam,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl Stage1Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Stage1Model::new(cfg)?;
        let adam = Adam::for_groups(cfg.stage1.optimizer.clone(), &model.groups());
        Ok(Self {
            model,
            config: cfg.clone(),
            adam,
            step: 0,
            losses: Vec::new(),
        })
    }

    fn draws(&self, train: &[usize]) -> Vec<Draw> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ DATA_SALT);
        rng.set_stream(self.step as u64);
        let c = &self.config;
        let shape = (c.generator.token_count(), c.generator.patch_dim());
        (0..c.stage1.batch)
            .map(|_| Draw {
                video: train[rng.random_range(0..train.len())],
                t: rng.random_range(0..c.generator.diffusion_steps),
                with_motion: !rng.random_bool(c.stage1.motion_dropout.clamp(0.0, 1.0)),
                noise: Mat::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng)),
            })
            .collect()
    }

    /// Mean loss of the batch the next step would use, without updating.
    pub fn peek_loss(&self, store: &FeatureStore, train: &[usize]) -> Result<f64> {
        let draws = self.draws(train);
        let mut total = 0.0;
        for d in &draws {
            total += self.model.sample_loss(
                &store.videos[d.video],
                d.t,
                &d.noise,
                d.with_motion,
                None,
            )?;
        }
        Ok(total / draws.len() as f64)
    }

    /// One optimiser step over a batch of `train` (indices into `store`).
    pub fn train_step(&mut self, store: &FeatureStore, train: &[usize]) -> Result<f64> {
        let min = self.config.stage1.min_corpus;
        if train.len() < min {
            return Err(Error::CorpusTooSmall {
                found: train.len(),
                required: min,
            });
        }
        let draws = self.draws(train);
        let groups = self.model.groups();
        let mut grads = [
            crate::params::zeros_like(groups[0]),
            crate::params::zeros_like(groups[1]),
            crate::params::zeros_like(groups[2]),
        ];
        let mut total = 0.0;
        for d in &draws {
            total += self.model.sample_loss(
                &store.videos[d.video],
                d.t,
                &d.noise,
                d.with_motion,
                Some(&mut grads),
            )?;
        }
        let scale = 1.0 / draws.len() as f64;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
        let Stage1Model {
            generator,
            motion_resampler,
        } = &mut self.model;
        let mut adapters = std::mem::take(generator.adapter_params_mut());
        self.adam.step_groups(
            &mut [
                generator.denoiser_params_mut(),
                &mut adapters,
                motion_resampler.params_mut(),
            ],
            &[&grads[0], &grads[1], &grads[2]],
        );
        *generator.adapter_params_mut() = adapters;
        let loss = total * scale;
        self.losses.push(loss);
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `config.stage1.steps` steps have been taken, calling
    /// `progress(step, loss)` after each.
    pub fn run(
        &mut self,
        store: &FeatureStore,
        train: &[usize],
        mut progress: impl FnMut(usize, f64),
    ) -> Result<()> {
        while self.step < self.config.stage1.steps {
            let loss = self.train_step(store, train)?;
            progress(self.step, loss);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (first, second) = self.adam.moments();
        let moments = |values: &[Mat]| {
            let mut set = ParamSet::new();
            for (i, m) in values.iter().enumerate() {
                set.add(format!("{i}"), m.clone());
            }
            set
        };
        let meta = serde_json::json!({
            "config": self.config,
            "step": self.step,
            "adam_steps": self.adam.steps_taken(),
            "losses": self.losses,
        });
        let [d, a, r] = self.model.groups();
        Checkpoint::new(STAGE1_KIND, meta)
            .with_group("denoiser", d.clone())
            .with_group("adapters", a.clone())
            .with_group("motion_resampler", r.clone())
            .with_group("adam.first", moments(first))
            .with_group("adam.second", moments(second))
    }

    /// Restores a trainer, including optimiser state, from a checkpoint
    /// written by [`Stage1Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| Error::CheckpointMismatch(m.to_string());
        let config: RunConfig = serde_json::from_value(ckpt.metadata["config"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        let model = Stage1Model::from_checkpoint(&config, ckpt)?;
        let step = ckpt.metadata["step"]
            .as_u64()
            .ok_or_else(|| bad("missing step"))? as usize;
        let adam_steps = ckpt.metadata["adam_steps"]
            .as_u64()
            .ok_or_else(|| bad("missing adam_steps"))?;
        let losses: Vec<f64> = serde_json::from_value(ckpt.metadata["losses"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        let first = ckpt.group("adam.first")?.values().to_vec();
        let second = ckpt.group("adam.second")?.values().to_vec();
        let adam = Adam::restore(config.stage1.optimizer.clone(), first, second, adam_steps);
        Ok(Self {
            model,
            config,
            adam,
            step,
            losses,
        })
    }
}

/// Moving average over a trailing window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
