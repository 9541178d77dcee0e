//! A configured run: corpus, frozen features and the held-out split, plus the
//! stage entry points shared by the command line and the tests.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, RenderDims};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::params::hex_digest;
use crate::retrieval::RetrievalIndex;

use super::config::RunConfig;
use super::eval::{build_index, heldout_split, MotionRag};
use super::features::FeatureStore;
use super::stage1::{Stage1Model, Stage1Trainer};
use super::stage2::{trained_against, Stage2Data, Stage2Model, Stage2Trainer};

#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: RunConfig,
    pub dims: RenderDims,
    pub store: FeatureStore,
    /// Store indices of the training split.
    pub train: Vec<usize>,
    /// Store indices of the held-out split.
    pub heldout: Vec<usize>,
}

impl Workspace {
    /// Opens `config.corpus` and computes frozen features for every video.
    pub fn open(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let corpus = Corpus::open(&config.corpus)?;
        let store = FeatureStore::build(
            &corpus,
            &Encoders::new(&config.encoder),
            config.generator.patch,
        )?;
        Self::from_store(config, corpus.dims(), store)
    }

    pub fn from_store(config: &RunConfig, dims: RenderDims, store: FeatureStore) -> Result<Self> {
        config.validate()?;
        let g = &config.generator;
        if (g.frames, g.height, g.width) != (dims.frames, dims.height, dims.width) {
            return Err(Error::Config(format!(
                "generator clip {}x{}x{} does not match corpus {}x{}x{}",
                g.frames, g.height, g.width, dims.frames, dims.height, dims.width
            )));
        }
        let ids: Vec<String> = store.videos.iter().map(|v| v.id.clone()).collect();
        let (train, heldout) = heldout_split(&ids, config.eval.heldout_fraction, config.seed);
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            train,
            heldout,
        })
    }

    /// Retrieval index over the training split.
    pub fn training_index(&self) -> Result<RetrievalIndex> {
        build_index(&self.store, &self.train, self.config.embedding_dim)
    }

    /// Loads `config.index`, reporting a missing file as [`Error::IndexMissing`].
    pub fn load_index(&self) -> Result<RetrievalIndex> {
        let path = &self.config.index;
        if !path.exists() {
            return Err(Error::IndexMissing(path.display().to_string()));
        }
        RetrievalIndex::load(path)
    }

    pub fn train_stage1(&self, progress: impl FnMut(usize, f64)) -> Result<Stage1Trainer> {
        let mut trainer = Stage1Trainer::new(&self.config)?;
        trainer.run(&self.store, &self.train, progress)?;
        Ok(trainer)
    }

    pub fn train_stage2(
        &self,
        stage1: &Stage1Model,
        index: &RetrievalIndex,
        progress: impl FnMut(usize, f64),
    ) -> Result<(Stage2Trainer, Stage2Data)> {
        let data = Stage2Data::prepare(
            stage1,
            &self.store,
            &self.train,
            index,
            self.config.stage2.max_k,
        )?;
        let mut trainer = Stage2Trainer::new(&self.config, stage1)?;
        trainer.run(stage1, &self.store, &data, progress)?;
        Ok((trainer, data))
    }

    pub fn system(
        &self,
        stage1: Stage1Model,
        stage2: Option<Stage2Model>,
        index: RetrievalIndex,
    ) -> Result<MotionRag> {
        MotionRag::new(self.config.clone(), stage1, stage2, &self.store, index)
    }

    pub fn load_stage1(&self, path: impl AsRef<Path>) -> Result<Stage1Model> {
        load_stage1(&self.config, path)
    }

    pub fn load_stage2(&self, path: impl AsRef<Path>, stage1: &Stage1Model) -> Result<Stage2Model> {
        load_stage2(&self.config, path, stage1)
    }
}

pub fn load_stage1(config: &RunConfig, path: impl AsRef<Path>) -> Result<Stage1Model> {
    Stage1Model::from_checkpoint(config, &Checkpoint::load(path)?)
}

/// Loads a stage-2 checkpoint and checks that it was trained against exactly
/// these stage-1 weights.
pub fn load_stage2(
    config: &RunConfig,
    path: impl AsRef<Path>,
    stage1: &Stage1Model,
) -> Result<Stage2Model> {
    let ckpt = Checkpoint::load(path)?;
    let expected = hex_digest(&stage1.digest());
    match trained_against(&ckpt) {
        Some(d) if d == expected => Stage2Model::from_checkpoint(config, &ckpt),
        found => Err(Error::CheckpointMismatch(format!(
            "stage-2 checkpoint was trained against stage-1 {}, loaded stage-1 is {expected}",
            found.unwrap_or("<unknown>")
        ))),
    }
}
