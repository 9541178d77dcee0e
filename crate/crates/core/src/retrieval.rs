//! Caption-embedding retrieval database: a deterministic signed-hash text
//! embedder, exact cosine top-K search and a binary index file.
//!
//! Index file layout (all integers little-endian `u32`):
//!
//! ```text
//! "MRI1" | version | d_e | count
//! count × ( id_len | id bytes | d_e × f32 )
//! count × ( caption_len | caption bytes )
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, IoContext, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"MRI1";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_EMBEDDING_DIM: usize = 256;
/// Number of retrieved examples used throughout training and inference.
pub const DEFAULT_TOP_K: usize = 9;

/// Unit-norm (or all-zero) caption embedding stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing: each token adds ±1 at `hash mod dim`, with the sign
/// taken from the top hash bit; the count vector is L2-normalised.
pub fn embed_caption(text: &str, dim: usize) -> Embedding {
    let mut acc = vec![0.0f64; dim];
    for token in tokenize(text) {
        let h = fnv1a64(token.as_bytes());
        let slot = (h % dim as u64) as usize;
        acc[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        acc.iter().map(|v| (v / norm) as f32).collect()
    } else {
        vec![0.0; dim]
    };
    Embedding { values }
}

/// Source of caption embeddings. External encoders plug in here.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding;
}

#[derive(Clone, Copy, Debug)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Embedding {
        embed_caption(text, self.dim)
    }
}

/// `(a·b)/(‖a‖‖b‖)`, or 0 when either vector is zero.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(&a.values, &b.values) / (na * nb))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRecord {
    pub id: String,
    pub caption: String,
    pub embedding: Embedding,
}

impl RetrievalRecord {
    pub fn from_caption(
        id: impl Into<String>,
        caption: impl Into<String>,
        embedder: &dyn TextEmbedder,
    ) -> Self {
        let caption = caption.into();
        Self {
            id: id.into(),
            embedding: embedder.embed(&caption),
            caption,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Query {
    pub text: String,
    pub k: usize,
}

impl Query {
    pub fn new(text: impl Into<String>, k: usize) -> Self {
        Self {
            text: text.into(),
            k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub record: RetrievalRecord,
    pub similarity: f64,
}

/// Immutable exact-search index.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    records: Vec<RetrievalRecord>,
    norms: Vec<f64>,
    dim: usize,
    version: u32,
}

impl PartialEq for RetrievalIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.version == other.version && self.records == other.records
    }
}

impl RetrievalIndex {
    pub fn build(records: Vec<RetrievalRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDatabase)?;
        let dim = first.embedding.dim();
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.embedding.dim(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let norms = records.iter().map(|r| r.embedding.norm()).collect();
        Ok(Self {
            records,
            norms,
            dim,
            version: INDEX_VERSION,
        })
    }

    /// Embeds `(id, caption)` pairs with `embedder` and builds the index.
    pub fn from_captions<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a str)>,
        embedder: &dyn TextEmbedder,
    ) -> Result<Self> {
        Self::build(
            items
                .into_iter()
                .map(|(id, c)| RetrievalRecord::from_caption(id, c, embedder))
                .collect(),
        )
    }

    pub fn records(&self) -> &[RetrievalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// Top-`k` by cosine similarity to `query`, ties broken by ascending id.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        exclude: Option<&HashSet<String>>,
    ) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let qn = query.norm();
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| exclude.is_none_or(|ex| !ex.contains(&r.id)))
            .map(|(i, r)| {
                let denom = qn * self.norms[i];
                let sim = if denom == 0.0 {
                    0.0
                } else {
                    dot(&query.values, &r.embedding.values) / denom
                };
                (sim, i)
            })
            .collect();
        if scored.is_empty() {
            return Err(Error::EmptyAfterExclusion {
                excluded: exclude.map_or(0, HashSet::len),
            });
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0)
                .then_with(|| self.records[a.1].id.cmp(&self.records[b.1].id))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(similarity, i)| Hit {
                record: self.records[i].clone(),
                similarity,
            })
            .collect())
    }

    /// Embeds the query text with the hashing embedder at the index width.
    pub fn retrieve_top_k(
        &self,
        query: &Query,
        exclude: Option<&HashSet<String>>,
    ) -> Result<Vec<Hit>> {
        let embedding = embed_caption(&query.text, self.dim);
        self.search(&embedding, query.k, exclude)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        for v in [self.version, self.dim as u32, self.records.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            for v in &r.embedding.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for r in &self.records {
            out.extend_from_slice(&(r.caption.len() as u32).to_le_bytes());
            out.extend_from_slice(r.caption.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != INDEX_MAGIC {
            return Err(Error::CorruptIndex("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let dim = cur.u32()? as usize;
        let count = cur.u32()? as usize;
        let mut partial = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let id = cur.string(len)?;
            let raw = cur.take(dim * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            partial.push((id, Embedding { values }));
        }
        let mut records = Vec::with_capacity(count);
        for (id, embedding) in partial {
            let len = cur.u32()? as usize;
            let caption = cur.string(len)?;
            records.push(RetrievalRecord {
                id,
                caption,
                embedding,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::CorruptIndex(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Self::build(records).map_err(|e| match e {
            Error::EmptyDatabase => Error::EmptyDatabase,
            other => Error::CorruptIndex(other.to_string()),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::CorruptIndex(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::CorruptIndex(e.to_string()))
    }
}

#[derive(Deserialize)]
struct ImportedRecord {
    id: String,
    #[serde(default)]
    caption: String,
    embedding: Vec<f32>,
}

/// Builds records from externally computed embeddings stored as JSON lines
/// `{"id": .., "caption": .., "embedding": [..]}`.
pub fn import_embeddings(path: impl AsRef<Path>) -> Result<Vec<RetrievalRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let r: ImportedRecord = serde_json::from_str(line)
                .map_err(|e| Error::CorruptIndex(format!("line {}: {e}", n + 1)))?;
            Ok(RetrievalRecord {
                id: r.id,
                caption: r.caption,
                embedding: Embedding {
                    values: r.embedding,
                },
            })
        })
        .collect()
}
