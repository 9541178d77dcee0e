//! Frozen featurisers standing in for pretrained video and image encoders.
//!
//! The video encoder patchifies consecutive-frame differences so that its
//! tokens carry motion; the image encoder patchifies a single frame. Both
//! project patches with a fixed seeded Gaussian matrix and add sinusoidal
//! positions. Neither has trainable state.

use ndarray::{s, Array2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{Frame, Frames};
use crate::error::{Error, Result};
use crate::nn::grid_sinusoid_table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch: usize,
    pub dim: usize,
    pub video_seed: u64,
    pub image_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 64,
            video_seed: 0x5eed_0001,
            image_seed: 0x5eed_0002,
        }
    }
}

/// `N_v × d_enc` temporal-difference patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseVideoFeatures {
    pub tokens: Mat,
    pub seed: u64,
}

/// `N_i × d_enc` patch tokens of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseImageFeatures {
    pub tokens: Mat,
    pub seed: u64,
}

/// Flattens a `H×W×3` frame into `(H/P)(W/P)` rows of `P·P·3` values, in
/// row-major patch order with (row, column, channel) order inside a patch.
pub fn patchify(frame: ArrayView3<f64>, patch: usize) -> Result<Mat> {
    let (h, w, c) = frame.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 || c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w}x{c} frame is not tileable by {patch}-pixel patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Mat::zeros((ph * pw, patch * patch * 3));
    for pr in 0..ph {
        for pc in 0..pw {
            let block = frame.slice(s![
                pr * patch..(pr + 1) * patch,
                pc * patch..(pc + 1) * patch,
                ..
            ]);
            let mut row = out.row_mut(pr * pw + pc);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Mat, height: usize, width: usize, patch: usize) -> Frame {
    let pw = width / patch;
    let mut frame = Frame::zeros((height, width, 3));
    for (idx, row) in patches.rows().into_iter().enumerate() {
        let (pr, pc) = (idx / pw, idx % pw);
        let mut block = frame.slice_mut(s![
            pr * patch..(pr + 1) * patch,
            pc * patch..(pc + 1) * patch,
            ..
        ]);
        for (dst, src) in block.iter_mut().zip(row.iter()) {
            *dst = *src;
        }
    }
    frame
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    patch: usize,
    seed: u64,
    projection: Mat,
}

impl VideoEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let projection = gaussian_matrix(cfg.patch * cfg.patch * 3, cfg.dim, cfg.video_seed);
        Self {
            patch: cfg.patch,
            seed: cfg.video_seed,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn token_count(&self, frames: usize, height: usize, width: usize) -> usize {
        (frames - 1) * (height / self.patch) * (width / self.patch)
    }

    pub fn encode(&self, frames: &Frames) -> Result<DenseVideoFeatures> {
        let (t, h, w, _) = frames.dim();
        if t < 2 {
            return Err(Error::ShapeMismatch(format!(
                "video encoder needs at least 2 frames, got {t}"
            )));
        }
        let per_frame = (h / self.patch.max(1)) * (w / self.patch.max(1));
        let mut diffs = Mat::zeros(((t - 1) * per_frame, self.projection.nrows()));
        for step in 0..t - 1 {
            let d = &frames.index_axis(Axis(0), step + 1) - &frames.index_axis(Axis(0), step);
            let patches = patchify(d.view(), self.patch)?;
            diffs
                .slice_mut(s![step * per_frame..(step + 1) * per_frame, ..])
                .assign(&patches);
        }
        let mut tokens = diffs.dot(&self.projection);
        tokens += &grid_sinusoid_table(&[t - 1, h / self.patch, w / self.patch], self.dim());
        Ok(DenseVideoFeatures {
            tokens,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    patch: usize,
    seed: u64,
    projection: Mat,
}

impl ImageEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let projection = gaussian_matrix(cfg.patch * cfg.patch * 3, cfg.dim, cfg.image_seed);
        Self {
            patch: cfg.patch,
            seed: cfg.image_seed,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn encode(&self, frame: ArrayView3<f64>) -> Result<DenseImageFeatures> {
        let (h, w, _) = frame.dim();
        let patches = patchify(frame, self.patch)?;
        let mut tokens = patches.dot(&self.projection);
        tokens += &grid_sinusoid_table(&[h / self.patch, w / self.patch], self.dim());
        Ok(DenseImageFeatures {
            tokens,
            seed: self.seed,
        })
    }
}

/// Both frozen encoders built from one configuration.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub video: VideoEncoder,
    pub image: ImageEncoder,
}

impl Encoders {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            video: VideoEncoder::new(cfg),
            image: ImageEncoder::new(cfg),
        }
    }
}
