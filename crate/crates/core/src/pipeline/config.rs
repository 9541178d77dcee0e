//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cama::MctConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::generator::GeneratorConfig;
use crate::optim::AdamConfig;
use crate::resampler::ResamplerConfig;
use crate::retrieval::{DEFAULT_EMBEDDING_DIM, DEFAULT_TOP_K};

/// Numeric precision of network evaluation. Only 64-bit is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch: usize,
    /// Fraction of samples trained without motion tokens.
    pub motion_dropout: f64,
    pub optimizer: AdamConfig,
    pub min_corpus: usize,
    /// Window of the moving average reported as the smoothed loss.
    pub smoothing: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 12000,
            batch: 4,
            motion_dropout: 0.1,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                warmup: 100,
                ..Default::default()
            },
            min_corpus: 100,
            smoothing: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch: usize,
    /// Context sizes are drawn uniformly from `min_k..=max_k`.
    pub min_k: usize,
    pub max_k: usize,
    pub optimizer: AdamConfig,
    pub smoothing: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 8,
            min_k: 1,
            max_k: 9,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                warmup: 100,
                ..Default::default()
            },
            smoothing: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub heldout_fraction: f64,
    /// Upper bound on evaluated held-out videos; 0 means all of them.
    pub max_videos: usize,
    pub sample_steps: usize,
    /// Sampling seed offset; video `i` is sampled with `seed + i`.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.1,
            max_videos: 100,
            sample_steps: 10,
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub seed: u64,
    pub top_k: usize,
    pub embedding_dim: usize,
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub motion_resampler: ResamplerConfig,
    pub image_resampler: ResamplerConfig,
    pub mct: MctConfig,
    pub generator: GeneratorConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            index: PathBuf::from("index.mri"),
            seed: 7,
            top_k: DEFAULT_TOP_K,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            precision: Precision::F64,
            encoder: EncoderConfig::default(),
            motion_resampler: ResamplerConfig::default(),
            image_resampler: ResamplerConfig::default(),
            mct: MctConfig::default(),
            generator: GeneratorConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    /// Reads a TOML file; relative corpus and index paths resolve against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path).at(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.corpus = dir.join(&cfg.corpus);
            cfg.index = dir.join(&cfg.index);
        }
        Ok(cfg)
    }

    /// Internal consistency; file existence is checked by the stages that
    /// need the files.
    pub fn validate(&self) -> Result<()> {
        if self.precision != Precision::F64 {
            return Err(Error::Config("only 64-bit precision is implemented".into()));
        }
        self.generator.validate()?;
        let m = &self.motion_resampler;
        let i = &self.image_resampler;
        let checks = [
            (self.top_k >= 1, "top_k must be at least 1".to_string()),
            (
                m.input_dim == self.encoder.dim && i.input_dim == self.encoder.dim,
                "resampler input width must equal encoder dim".into(),
            ),
            (
                m.tokens == i.tokens && m.width == i.width,
                "motion and image resamplers must emit the same L×d".into(),
            ),
            (
                self.mct.tokens == m.tokens && self.mct.width == m.width,
                "MCT width must match the resamplers".into(),
            ),
            (
                self.generator.motion_dim == m.width,
                "generator motion_dim must equal resampler width".into(),
            ),
            (
                self.generator.image_dim == self.encoder.dim,
                "generator image_dim must equal encoder dim".into(),
            ),
            (
                self.generator.patch == self.encoder.patch,
                "generator and encoder patch sizes differ".into(),
            ),
            (
                (self.top_k.max(self.stage2.max_k) + 1) * self.mct.tokens <= self.mct.max_seq_len,
                format!(
                    "K+1 segments of {} tokens exceed max_seq_len {}",
                    self.mct.tokens, self.mct.max_seq_len
                ),
            ),
            (
                self.stage2.min_k >= 1 && self.stage2.min_k <= self.stage2.max_k,
                "stage2 k range is empty".into(),
            ),
            (
                self.eval.heldout_fraction > 0.0 && self.eval.heldout_fraction < 1.0,
                "heldout_fraction must be in (0,1)".into(),
            ),
            (
                self.stage1.batch >= 1 && self.stage2.batch >= 1,
                "batch sizes must be positive".into(),
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg));
            }
        }
        Ok(())
    }
}
