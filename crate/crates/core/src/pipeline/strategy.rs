//! Adaptation strategies: how retrieved examples become the motion condition.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::retrieval::{fnv1a64, Query, RetrievalIndex};

use super::stage2::Stage2Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdaptationStrategy {
    NoMotion,
    Top1,
    AvgK(usize),
    MctK(usize),
    /// `k` uniform database picks, averaged.
    RandomK {
        k: usize,
        seed: u64,
    },
    /// The same picks as `RandomK`, fed to the MCT.
    MctRandomK {
        k: usize,
        seed: u64,
    },
    Oracle,
}

impl AdaptationStrategy {
    pub fn k(&self) -> Option<usize> {
        match *self {
            Self::NoMotion | Self::Oracle => None,
            Self::Top1 => Some(1),
            Self::AvgK(k)
            | Self::MctK(k)
            | Self::RandomK { k, .. }
            | Self::MctRandomK { k, .. } => Some(k),
        }
    }

    pub fn needs_mct(&self) -> bool {
        matches!(self, Self::MctK(_) | Self::MctRandomK { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == Some(0) {
            return Err(Error::ZeroK);
        }
        Ok(())
    }
}

impl fmt::Display for AdaptationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoMotion => write!(f, "NoMotion"),
            Self::Top1 => write!(f, "Top-1"),
            Self::AvgK(k) => write!(f, "Avg-{k}"),
            Self::MctK(k) => write!(f, "MCT-{k}"),
            Self::RandomK { k, .. } => write!(f, "Rand-{k}"),
            Self::MctRandomK { k, .. } => write!(f, "MCT-Rand-{k}"),
            Self::Oracle => write!(f, "Oracle"),
        }
    }
}

/// Parses the names produced by `Display` (case-insensitive); random
/// variants take `seed` from an optional `@seed` suffix, default 0.
impl FromStr for AdaptationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, seed) = match lower.split_once('@') {
            Some((n, sd)) => (
                n.to_string(),
                sd.parse()
                    .map_err(|_| Error::Config(format!("bad seed in {s}")))?,
            ),
            None => (lower.clone(), 0),
        };
        let num = |prefix: &str| -> Option<usize> {
            name.strip_prefix(prefix).and_then(|r| r.parse().ok())
        };
        let parsed = match name.as_str() {
            "nomotion" | "none" | "baseline" => Some(Self::NoMotion),
            "top-1" | "top1" => Some(Self::Top1),
            "oracle" => Some(Self::Oracle),
            _ => num("mct-rand-")
                .map(|k| Self::MctRandomK { k, seed })
                .or_else(|| num("rand-").map(|k| Self::RandomK { k, seed }))
                .or_else(|| num("mct-").map(Self::MctK))
                .or_else(|| num("avg-").map(Self::AvgK)),
        };
        let strategy = parsed.ok_or_else(|| Error::Config(format!("unknown strategy {s}")))?;
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Per-database-video material needed by the strategies.
#[derive(Clone, Debug)]
pub struct DatabaseEntry {
    pub motion: Mat,
    pub image: Mat,
}

/// Retrieval database with frozen motion tokens and image features by id.
#[derive(Clone, Debug)]
pub struct MotionDatabase {
    pub index: RetrievalIndex,
    pub entries: HashMap<String, DatabaseEntry>,
}

/// What is known about the generation request.
#[derive(Clone, Copy, Debug)]
pub struct AdaptRequest<'a> {
    /// Stable identifier of the request; keys the random picks.
    pub key: &'a str,
    pub prompt: &'a str,
    pub image: &'a Mat,
    /// Ground-truth motion tokens, known only during evaluation.
    pub oracle: Option<&'a Mat>,
    pub exclude: Option<&'a HashSet<String>>,
}

/// Database ids chosen for a request, most relevant first.
pub fn select_examples(
    strategy: &AdaptationStrategy,
    db: &MotionDatabase,
    request: &AdaptRequest<'_>,
) -> Result<Vec<String>> {
    let Some(k) = strategy.k() else {
        return Ok(Vec::new());
    };
    if k == 0 {
        return Err(Error::ZeroK);
    }
    if db.index.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    match *strategy {
        AdaptationStrategy::RandomK { seed, .. } | AdaptationStrategy::MctRandomK { seed, .. } => {
            let pool: Vec<&str> = db
                .index
                .records()
                .iter()
                .map(|r| r.id.as_str())
                .filter(|id| request.exclude.is_none_or(|ex| !ex.contains(*id)))
                .collect();
            if pool.is_empty() {
                return Err(Error::EmptyAfterExclusion {
                    excluded: request.exclude.map_or(0, HashSet::len),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(request.key.as_bytes()));
            let picks = sample(&mut rng, pool.len(), k.min(pool.len()));
            Ok(picks.into_iter().map(|i| pool[i].to_string()).collect())
        }
        _ => {
            let hits = db
                .index
                .retrieve_top_k(&Query::new(request.prompt, k), request.exclude)?;
            Ok(hits.into_iter().map(|h| h.record.id).collect())
        }
    }
}

fn entry<'a>(db: &'a MotionDatabase, id: &str) -> Result<&'a DatabaseEntry> {
    db.entries
        .get(id)
        .ok_or_else(|| Error::IndexMissing(format!("no stored motion for database id {id}")))
}

/// Motion condition for `strategy`; `None` means generate without motion.
pub fn adapt_motion(
    strategy: &AdaptationStrategy,
    request: &AdaptRequest<'_>,
    db: &MotionDatabase,
    stage2: Option<&Stage2Model>,
) -> Result<Option<Mat>> {
    strategy.validate()?;
    match strategy {
        AdaptationStrategy::NoMotion => Ok(None),
        AdaptationStrategy::Oracle => request
            .oracle
            .cloned()
            .map(Some)
            .ok_or(Error::OracleUnavailable),
        _ => {
            let ids = select_examples(strategy, db, request)?;
            let entries = ids
                .iter()
                .map(|id| entry(db, id))
                .collect::<Result<Vec<_>>>()?;
            if strategy.needs_mct() {
                let model = stage2.ok_or_else(|| {
                    Error::CheckpointMismatch("MCT strategies need a stage-2 checkpoint".into())
                })?;
                let examples: Vec<(&Mat, &Mat)> =
                    entries.iter().map(|e| (&e.image, &e.motion)).collect();
                model.adapt(&examples, request.image).map(Some)
            } else {
                let mut mean = entries[0].motion.clone();
                for e in &entries[1..] {
                    mean += &e.motion;
                }
                mean /= entries.len() as f64;
                Ok(Some(mean))
            }
        }
    }
}
