use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("motion envelope leaves the {width}x{height} frame at frame {frame}")]
    EnvelopeOutOfBounds {
        frame: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("corrupt manifest: {0}")]
    ManifestCorrupt(String),
    #[error("frames file for {id} does not match declared shape: {detail}")]
    FrameShapeMismatch { id: String, detail: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("retrieval database is empty")]
    EmptyDatabase,
    #[error("unsupported index version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("no candidates remain after excluding {excluded} ids")]
    EmptyAfterExclusion { excluded: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("context needs at least one retrieved example")]
    EmptyContext,
    #[error("diffusion step {step} outside 0..{steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("corpus has {found} videos; at least {required} required")]
    CorpusTooSmall { found: usize, required: usize },
    #[error("retrieval index missing: {0}")]
    IndexMissing(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("oracle strategy needs the ground-truth video")]
    OracleUnavailable,
    #[error("no foreground pixels above the luminance threshold")]
    NoForeground,
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
