//! Frozen encoder outputs computed once per video.

use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::corpus::{AppearanceSpec, Corpus, Frame, MotionSpec, SyntheticVideo};
use crate::encoders::Encoders;
use crate::error::Result;
use crate::generator::{video_to_tokens, ImageCondition};

#[derive(Clone, Debug)]
pub struct VideoFeatures {
    pub id: String,
    pub caption: String,
    pub motion: MotionSpec,
    pub appearance: AppearanceSpec,
    /// Clean video as generator patch tokens.
    pub tokens: Mat,
    pub first_frame: Frame,
    /// Dense video-encoder tokens.
    pub video: Mat,
    /// Dense image-encoder tokens of the first frame.
    pub image: Mat,
}

impl VideoFeatures {
    pub fn compute(video: &SyntheticVideo, encoders: &Encoders, patch: usize) -> Result<Self> {
        let first_frame = video.first_frame();
        Ok(Self {
            id: video.id.clone(),
            caption: video.caption.clone(),
            motion: video.motion,
            appearance: video.appearance,
            tokens: video_to_tokens(&video.frames, patch)?,
            video: encoders.video.encode(&video.frames)?.tokens,
            image: encoders.image.encode(first_frame.view())?.tokens,
            first_frame,
        })
    }

    pub fn condition(&self) -> ImageCondition {
        ImageCondition {
            frame: self.first_frame.clone(),
            features: self.image.clone(),
        }
    }
}

/// Features of every corpus video, in corpus order.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    pub videos: Vec<VideoFeatures>,
}

impl FeatureStore {
    pub fn build(corpus: &Corpus, encoders: &Encoders, patch: usize) -> Result<Self> {
        let videos = (0..corpus.len())
            .map(|i| VideoFeatures::compute(&corpus.video(i)?, encoders, patch))
            .collect::<Result<_>>()?;
        Ok(Self { videos })
    }

    pub fn from_videos(
        videos: &[SyntheticVideo],
        encoders: &Encoders,
        patch: usize,
    ) -> Result<Self> {
        let videos = videos
            .iter()
            .map(|v| VideoFeatures::compute(v, encoders, patch))
            .collect::<Result<_>>()?;
        Ok(Self { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.id == id)
    }

    /// SHA-256 over all encoder outputs.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.videos {
            for m in [&v.video, &v.image] {
                for x in m.iter() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }
}
