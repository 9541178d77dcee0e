//! End-to-end system: held-out split, inference, evaluation reports and the
//! ablation harness.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{Frames, RenderDims};
use crate::error::{Error, Result};
use crate::generator::{tokens_to_video, ImageCondition};
use crate::retrieval::{HashingEmbedder, RetrievalIndex};

use super::config::RunConfig;
use super::estimate::{estimate_motion, motion_error, MAX_MOTION_ERROR};
use super::features::FeatureStore;
use super::stage1::Stage1Model;
use super::stage2::Stage2Model;
use super::strategy::{
    adapt_motion, select_examples, AdaptRequest, AdaptationStrategy, DatabaseEntry, MotionDatabase,
};

const SPLIT_SALT: u64 = 0x5350_4c54;

/// Seeded partition of `ids` into `(train, heldout)`; the held-out part has
/// `ceil(fraction·n)` ids. Both lists keep the input order.
pub fn heldout_split(ids: &[String], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|a, b| ids[*a].cmp(&ids[*b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_held = ((ids.len() as f64) * fraction).ceil() as usize;
    let held: HashSet<usize> = order[..n_held.min(ids.len())].iter().copied().collect();
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for i in 0..ids.len() {
        if held.contains(&i) {
            heldout.push(i);
        } else {
            train.push(i);
        }
    }
    (train, heldout)
}

/// Index over the captions of `videos` (store indices).
pub fn build_index(store: &FeatureStore, videos: &[usize], dim: usize) -> Result<RetrievalIndex> {
    let embedder = HashingEmbedder { dim };
    RetrievalIndex::from_captions(
        videos.iter().map(|&i| {
            (
                store.videos[i].id.as_str(),
                store.videos[i].caption.as_str(),
            )
        }),
        &embedder,
    )
}

/// Trained models plus the retrieval database.
#[derive(Clone, Debug)]
pub struct MotionRag {
    pub config: RunConfig,
    pub stage1: Stage1Model,
    pub stage2: Option<Stage2Model>,
    pub database: MotionDatabase,
}

/// Result of one generation.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub video: Frames,
    pub motion: Option<Mat>,
    /// Database ids used as examples, most relevant first.
    pub examples: Vec<String>,
    /// Wall-clock seconds spent retrieving and adapting.
    pub adaptation_seconds: f64,
}

impl MotionRag {
    /// Database over `videos` (store indices) with frozen motion tokens.
    pub fn new(
        config: RunConfig,
        stage1: Stage1Model,
        stage2: Option<Stage2Model>,
        store: &FeatureStore,
        index: RetrievalIndex,
    ) -> Result<Self> {
        let mut entries = std::collections::HashMap::with_capacity(index.len());
        for r in index.records() {
            let i = store.position(&r.id).ok_or_else(|| {
                Error::IndexMissing(format!("index id {} is not in the corpus", r.id))
            })?;
            let v = &store.videos[i];
            entries.insert(
                r.id.clone(),
                DatabaseEntry {
                    motion: stage1.motion_tokens(v)?,
                    image: v.image.clone(),
                },
            );
        }
        Ok(Self {
            config,
            stage1,
            stage2,
            database: MotionDatabase { index, entries },
        })
    }

    /// Retrieve, adapt and sample.
    #[allow(clippy::too_many_arguments)]
    pub fn infer(
        &self,
        condition: &ImageCondition,
        prompt: &str,
        key: &str,
        strategy: &AdaptationStrategy,
        oracle: Option<&Mat>,
        exclude: Option<&HashSet<String>>,
        seed: u64,
    ) -> Result<InferOutput> {
        let request = AdaptRequest {
            key,
            prompt,
            image: &condition.features,
            oracle,
            exclude,
        };
        let start = Instant::now();
        let examples = select_examples(strategy, &self.database, &request)?;
        let motion = adapt_motion(strategy, &request, &self.database, self.stage2.as_ref())?;
        let adaptation_seconds = start.elapsed().as_secs_f64();
        let steps = self.config.eval.sample_steps;
        let video = self
            .stage1
            .generator
            .sample(condition, motion.as_ref(), steps, seed)?;
        Ok(InferOutput {
            video,
            motion,
            examples,
            adaptation_seconds,
        })
    }
}

/// Per-video evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub strategy: String,
    pub id: String,
    pub seed: u64,
    pub motion_error: f64,
    pub pixel_mse: f64,
    pub token_l2: f64,
    /// Wall-clock; kept out of the serialised records so that reruns compare
    /// bit-exactly.
    #[serde(skip)]
    pub adaptation_seconds: f64,
}

/// Aggregate row of an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub strategy: String,
    pub motion_error: f64,
    pub pixel_mse: f64,
    pub token_l2: f64,
    pub videos: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub records: Vec<EvalRecord>,
    /// Slowest retrieve-and-adapt step observed, in seconds.
    #[serde(skip)]
    pub max_adaptation_seconds: f64,
}

impl EvalReport {
    pub fn row(&self, strategy: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Aligned text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>12} {:>12} {:>7}",
            "strategy", "motion_err", "pixel_mse", "token_l2", "videos"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>12.6} {:>12.6} {:>12.6} {:>7}",
                r.strategy, r.motion_error, r.pixel_mse, r.token_l2, r.videos
            );
        }
        out
    }

    /// One JSON object per row, then one per video record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("row serialises");
            v["record"] = "row".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for r in &self.records {
            let mut v = serde_json::to_value(r).expect("record serialises");
            v["record"] = "video".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

fn frobenius(a: &Mat) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs every strategy on every held-out video with identical sampling seeds
/// (`config.eval.seed + position`). Held-out ids are excluded from retrieval.
pub fn evaluate(
    system: &MotionRag,
    strategies: &[AdaptationStrategy],
    store: &FeatureStore,
    heldout: &[usize],
    dims: RenderDims,
) -> Result<EvalReport> {
    let cfg = &system.config.eval;
    let videos: Vec<usize> = if cfg.max_videos == 0 {
        heldout.to_vec()
    } else {
        heldout.iter().take(cfg.max_videos).copied().collect()
    };
    let exclude: HashSet<String> = heldout
        .iter()
        .map(|&i| store.videos[i].id.clone())
        .collect();
    let mut records = Vec::new();
    let mut max_adapt: f64 = 0.0;
    let mut oracle_tokens = Vec::with_capacity(videos.len());
    for &i in &videos {
        oracle_tokens.push(system.stage1.motion_tokens(&store.videos[i])?);
    }
    for strategy in strategies {
        for (pos, &i) in videos.iter().enumerate() {
            let v = &store.videos[i];
            let seed = cfg.seed + pos as u64;
            let out = system.infer(
                &v.condition(),
                &v.caption,
                &v.id,
                strategy,
                Some(&oracle_tokens[pos]),
                Some(&exclude),
                seed,
            )?;
            max_adapt = max_adapt.max(out.adaptation_seconds);
            let truth = tokens_to_video(&v.tokens, system.stage1.generator.config());
            let pixel_mse = (&out.video - &truth).mapv(|d| d * d).mean().unwrap_or(0.0);
            let motion_err = match estimate_motion(&out.video) {
                Ok(est) => motion_error(&est.spec, &v.motion, dims),
                Err(Error::NoForeground) => MAX_MOTION_ERROR,
                Err(e) => return Err(e),
            };
            let token_l2 = match &out.motion {
                Some(m) => frobenius(&(m - &oracle_tokens[pos])),
                None => frobenius(&oracle_tokens[pos]),
            };
            records.push(EvalRecord {
                strategy: strategy.to_string(),
                id: v.id.clone(),
                seed,
                motion_error: motion_err,
                pixel_mse,
                token_l2,
                adaptation_seconds: out.adaptation_seconds,
            });
        }
    }
    let seeds: Vec<u64> = (0..videos.len()).map(|p| cfg.seed + p as u64).collect();
    let rows = strategies
        .iter()
        .map(|s| {
            let name = s.to_string();
            let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.strategy == name).collect();
            let n = rs.len().max(1) as f64;
            EvalRow {
                strategy: name,
                motion_error: rs.iter().map(|r| r.motion_error).sum::<f64>() / n,
                pixel_mse: rs.iter().map(|r| r.pixel_mse).sum::<f64>() / n,
                token_l2: rs.iter().map(|r| r.token_l2).sum::<f64>() / n,
                videos: rs.len(),
                seeds: seeds.clone(),
            }
        })
        .collect();
    Ok(EvalReport {
        rows,
        records,
        max_adaptation_seconds: max_adapt,
    })
}

/// Rows of the ablation: baseline, retrieval aggregation and MCT at
/// `k ∈ {1, 5, 9}`, random-retrieval variants, and the oracle.
pub fn ablation_strategies(seed: u64) -> Vec<AdaptationStrategy> {
    use AdaptationStrategy::*;
    vec![
        NoMotion,
        Top1,
        AvgK(5),
        AvgK(9),
        MctK(1),
        MctK(5),
        MctK(9),
        RandomK { k: 9, seed },
        MctRandomK { k: 9, seed },
        Oracle,
    ]
}

pub fn ablate(
    system: &MotionRag,
    store: &FeatureStore,
    heldout: &[usize],
    dims: RenderDims,
) -> Result<EvalReport> {
    evaluate(
        system,
        &ablation_strategies(system.config.seed),
        store,
        heldout,
        dims,
    )
}
