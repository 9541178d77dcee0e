//! Stage 2: the motion context transformer and the image resampler learn to
//! predict a video's motion tokens from retrieved examples, with every
//! stage-1 weight frozen.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::cama::{
    build_block_causal_mask, segment_plan, ContextExample, MotionContextTransformer, Source,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{accumulate, hex_digest, zeros_like, ParamSet};
use crate::resampler::Resampler;
use crate::retrieval::{Query, RetrievalIndex};

use super::config::RunConfig;
use super::features::FeatureStore;
use super::stage1::Stage1Model;

pub const STAGE2_KIND: &str = "stage2";
const DATA_SALT: u64 = 0x5747_4532;

#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub image_resampler: Resampler,
    pub mct: MotionContextTransformer,
}

impl Stage2Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_SALT);
        let image_resampler = Resampler::new(cfg.image_resampler, &mut rng);
        let mct = MotionContextTransformer::new(cfg.mct, &mut rng);
        Ok(Self {
            image_resampler,
            mct,
        })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(STAGE2_KIND)?;
        Ok(Self {
            image_resampler: Resampler::from_params(
                cfg.image_resampler,
                ckpt.group("image_resampler")?.clone(),
            )?,
            mct: MotionContextTransformer::from_params(cfg.mct, ckpt.group("mct")?.clone())?,
        })
    }

    /// `f_i(F)` for dense image features.
    pub fn appearance_tokens(&self, image_features: &Mat) -> Result<Mat> {
        self.image_resampler.resample(image_features)
    }

    /// `M̂` from examples given as `(dense image features, motion tokens)` in
    /// relevance order and the target's dense image features.
    pub fn adapt(&self, examples: &[(&Mat, &Mat)], target_image: &Mat) -> Result<Mat> {
        let context = examples
            .iter()
            .enumerate()
            .map(|(i, (image, motion))| {
                Ok(ContextExample {
                    appearance: self.appearance_tokens(image)?,
                    motion: (*motion).clone(),
                    rank: i + 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.mct
            .adapt(&context, &self.appearance_tokens(target_image)?)
    }

    fn groups(&self) -> [&ParamSet; 2] {
        [self.image_resampler.params(), self.mct.params()]
    }

    /// Transfer loss for one target, optionally adding gradients into `acc`.
    fn sample_loss(
        &self,
        examples: &[(&Mat, &Mat)],
        target_image: &Mat,
        target_motion: &Mat,
        aux_weight: f64,
        acc: Option<&mut [Vec<Mat>; 2]>,
    ) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::EmptyContext);
        }
        let trainable = acc.is_some();
        let mut g = Graph::new();
        let pi = self.image_resampler.params().bind(&mut g, trainable);
        let pm = self.mct.params().bind(&mut g, trainable);
        let appearance = |g: &mut Graph, feats: &Mat| {
            let x = g.constant(feats.clone());
            self.image_resampler.forward(g, &pi, x)
        };
        let apps: Vec<Var> = examples
            .iter()
            .map(|(image, _)| appearance(&mut g, image))
            .collect();
        let target_app = appearance(&mut g, target_image);
        let mots: Vec<Var> = examples
            .iter()
            .map(|(_, m)| g.constant((*m).clone()))
            .collect();
        let inputs = self.mct.assemble(&mut g, &pm, &apps, &mots, target_app);
        let l = self.mct.config().tokens;
        let mask = build_block_causal_mask(&vec![l; examples.len() + 1]);
        let out = self
            .mct
            .forward(&mut g, &pm, inputs, &mask.allowed, aux_weight > 0.0);
        let target = g.constant(target_motion.clone());
        let mut loss = g.mse(out.prediction, target);
        let reported = g.scalar(loss);
        if let Some(all) = out.all_predictions {
            // Each example segment also predicts the motion of its own frame.
            let plan = segment_plan(examples.len(), self.mct.config().pairing);
            for (seg, (app, _)) in plan.iter().enumerate() {
                if let Source::Example(i) = app {
                    let rows = g.slice_rows(all, seg * l, l);
                    let aux = g.mse(rows, mots[*i]);
                    let aux = g.scale(aux, aux_weight / examples.len() as f64);
                    loss = g.add(loss, aux);
                }
            }
        }
        if let Some(acc) = acc {
            let grads = g.backward(loss);
            accumulate(
                &mut acc[0],
                &self.image_resampler.params().gradients(&grads, &pi),
            );
            accumulate(&mut acc[1], &self.mct.params().gradients(&grads, &pm));
        }
        Ok(reported)
    }
}

/// Frozen stage-1 outputs and retrieval results for the training split.
#[derive(Clone, Debug)]
pub struct Stage2Data {
    /// Store indices of the training videos.
    pub train: Vec<usize>,
    /// Motion tokens from the frozen resampler, by store index.
    pub motion: HashMap<usize, Mat>,
    /// Retrieved store indices (self excluded), most relevant first.
    pub neighbours: HashMap<usize, Vec<usize>>,
}

impl Stage2Data {
    pub fn prepare(
        stage1: &Stage1Model,
        store: &FeatureStore,
        train: &[usize],
        index: &RetrievalIndex,
        k: usize,
    ) -> Result<Self> {
        let mut motion = HashMap::with_capacity(train.len());
        for &i in train {
            motion.insert(i, stage1.motion_tokens(&store.videos[i])?);
        }
        let positions: HashMap<&str, usize> = train
            .iter()
            .map(|&i| (store.videos[i].id.as_str(), i))
            .collect();
        let mut neighbours = HashMap::with_capacity(train.len());
        for &i in train {
            let v = &store.videos[i];
            let exclude = HashSet::from([v.id.clone()]);
            let hits = index.retrieve_top_k(&Query::new(&v.caption, k), Some(&exclude))?;
            let ids = hits
                .iter()
                .map(|h| {
                    positions.get(h.record.id.as_str()).copied().ok_or_else(|| {
                        Error::IndexMissing(format!(
                            "index entry {} is not a training video",
                            h.record.id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            neighbours.insert(i, ids);
        }
        Ok(Self {
            train: train.to_vec(),
            motion,
            neighbours,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Trainer {
    pub model: Stage2Model,
    pub config: RunConfig,
    adam: Adam,
    pub step: usize,
    pub losses: Vec<f64>,
    stage1_digest: String,
}

impl Stage2Trainer {
    pub fn new(cfg: &RunConfig, stage1: &Stage1Model) -> Result<Self> {
        let model = Stage2Model::new(cfg)?;
        let adam = Adam::for_groups(cfg.stage2.optimizer.clone(), &model.groups());
        Ok(Self {
            model,
            config: cfg.clone(),
            adam,
            step: 0,
            losses: Vec::new(),
            stage1_digest: hex_digest(&stage1.digest()),
        })
    }

    fn draws(&self, data: &Stage2Data) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ DATA_SALT);
        rng.set_stream(self.step as u64);
        let c = &self.config.stage2;
        (0..c.batch)
            .map(|_| {
                (
                    data.train[rng.random_range(0..data.train.len())],
                    rng.random_range(c.min_k..=c.max_k),
                )
            })
            .collect()
    }

    fn examples<'a>(
        store: &'a FeatureStore,
        data: &'a Stage2Data,
        target: usize,
        k: usize,
    ) -> Vec<(&'a Mat, &'a Mat)> {
        data.neighbours[&target]
            .iter()
            .take(k)
            .map(|j| (&store.videos[*j].image, &data.motion[j]))
            .collect()
    }

    /// Transfer loss of the untrained-or-current model on `targets` with `k`
    /// examples each.
    pub fn evaluate_loss(
        &self,
        store: &FeatureStore,
        data: &Stage2Data,
        targets: &[usize],
        k: usize,
    ) -> Result<f64> {
        let mut total = 0.0;
        for &t in targets {
            let ex = Self::examples(store, data, t, k);
            total +=
                self.model
                    .sample_loss(&ex, &store.videos[t].image, &data.motion[&t], 0.0, None)?;
        }
        Ok(total / targets.len().max(1) as f64)
    }

    pub fn train_step(&mut self, store: &FeatureStore, data: &Stage2Data) -> Result<f64> {
        let draws = self.draws(data);
        let groups = self.model.groups();
        let mut grads = [zeros_like(groups[0]), zeros_like(groups[1])];
        let mut total = 0.0;
        for &(target, k) in &draws {
            let ex = Self::examples(store, data, target, k);
            total += self.model.sample_loss(
                &ex,
                &store.videos[target].image,
                &data.motion[&target],
                self.config.mct.aux_weight,
                Some(&mut grads),
            )?;
        }
        let scale = 1.0 / draws.len() as f64;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
        let Stage2Model {
            image_resampler,
            mct,
        } = &mut self.model;
        self.adam.step_groups(
            &mut [image_resampler.params_mut(), mct.params_mut()],
            &[&grads[0], &grads[1]],
        );
        let loss = total * scale;
        self.losses.push(loss);
        self.step += 1;
        Ok(loss)
    }

    /// Trains for the configured number of steps, then checks that the
    /// stage-1 weights still hash to the value recorded at the start.
    pub fn run(
        &mut self,
        stage1: &Stage1Model,
        store: &FeatureStore,
        data: &Stage2Data,
        mut progress: impl FnMut(usize, f64),
    ) -> Result<()> {
        while self.step < self.config.stage2.steps {
            let loss = self.train_step(store, data)?;
            progress(self.step, loss);
        }
        self.verify_frozen(stage1)
    }

    pub fn verify_frozen(&self, stage1: &Stage1Model) -> Result<()> {
        let now = hex_digest(&stage1.digest());
        if now != self.stage1_digest {
            return Err(Error::CheckpointMismatch(format!(
                "stage-1 weights changed during stage 2: {} -> {now}",
                self.stage1_digest
            )));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "step": self.step,
            "losses": self.losses,
            "stage1_digest": self.stage1_digest,
        });
        let [i, m] = self.model.groups();
        Checkpoint::new(STAGE2_KIND, meta)
            .with_group("image_resampler", i.clone())
            .with_group("mct", m.clone())
    }
}

/// Stage-1 digest a stage-2 checkpoint was trained against.
pub fn trained_against(ckpt: &Checkpoint) -> Option<&str> {
    ckpt.metadata["stage1_digest"].as_str()
}
