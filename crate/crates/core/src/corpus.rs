//! Synthetic moving-shapes corpus: motion laws, hard-edged rendering,
//! templated captions, and the on-disk layout (`manifest.jsonl` plus one
//! `frames/<id>.mrv` file per video).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Video tensor laid out as frames × rows × columns × RGB.
pub type Frames = Array4<f64>;
/// Single frame, rows × columns × RGB.
pub type Frame = Array3<f64>;

pub const FRAMES_MAGIC: &[u8; 4] = b"MRV1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FRAMES_DIR: &str = "frames";
const MANIFEST_VERSION: u32 = 1;

/// Luminance above which a pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionKind {
    Linear,
    Circular,
    Oscillation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OscillationAxis {
    Horizontal,
    Vertical,
}

/// Closed-form motion law of the shape centre. Units are pixels and frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MotionSpec {
    Linear {
        vx: f64,
        vy: f64,
    },
    /// Orbit around `start − radius·(cos phase, sin phase)`.
    Circular {
        radius: f64,
        omega: f64,
        phase: f64,
    },
    /// `amplitude·sin(2π·freq·t)` offset along `axis`.
    Oscillation {
        amplitude: f64,
        freq: f64,
        axis: OscillationAxis,
    },
}

impl MotionSpec {
    pub fn kind(&self) -> MotionKind {
        match self {
            MotionSpec::Linear { .. } => MotionKind::Linear,
            MotionSpec::Circular { .. } => MotionKind::Circular,
            MotionSpec::Oscillation { .. } => MotionKind::Oscillation,
        }
    }

    /// Centre position at frame `t` for a shape starting at `(x0, y0)`.
    pub fn position(&self, x0: f64, y0: f64, t: f64) -> (f64, f64) {
        match *self {
            MotionSpec::Linear { vx, vy } => (x0 + vx * t, y0 + vy * t),
            MotionSpec::Circular {
                radius,
                omega,
                phase,
            } => {
                let cx = x0 - radius * phase.cos();
                let cy = y0 - radius * phase.sin();
                let a = omega * t + phase;
                (cx + radius * a.cos(), cy + radius * a.sin())
            }
            MotionSpec::Oscillation {
                amplitude,
                freq,
                axis,
            } => {
                let off = amplitude * (2.0 * PI * freq * t).sin();
                match axis {
                    OscillationAxis::Horizontal => (x0 + off, y0),
                    OscillationAxis::Vertical => (x0, y0 + off),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let ok = match *self {
            MotionSpec::Linear { vx, vy } => finite(&[vx, vy]),
            MotionSpec::Circular {
                radius,
                omega,
                phase,
            } => finite(&[radius, omega, phase]) && radius >= 0.0,
            MotionSpec::Oscillation {
                amplitude, freq, ..
            } => finite(&[amplitude, freq]) && amplitude >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Disk,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// extent `size`.
    fn covers(self, size: f64, dx: f64, dy: f64) -> bool {
        let h = size / 2.0;
        match self {
            ShapeKind::Square => dx.abs() < h && dy.abs() < h,
            ShapeKind::Disk => dx * dx + dy * dy < h * h,
            ShapeKind::Cross => {
                let arm = size / 6.0;
                (dx.abs() < h && dy.abs() < arm) || (dx.abs() < arm && dy.abs() < h)
            }
        }
    }
}

/// Named palette entries; every base colour has luminance well above
/// [`FOREGROUND_THRESHOLD`].
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.85, 0.20]),
    ("blue", [0.20, 0.35, 0.95]),
    ("yellow", [0.95, 0.90, 0.15]),
    ("magenta", [0.90, 0.20, 0.85]),
    ("white", [0.95, 0.95, 0.95]),
];
const COLOR_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceSpec {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub size: f64,
    pub x0: f64,
    pub y0: f64,
}

impl AppearanceSpec {
    /// Palette name closest to this colour.
    pub fn color_name(&self) -> &'static str {
        PALETTE
            .iter()
            .map(|(name, c)| {
                (
                    name,
                    c.iter()
                        .zip(&self.color)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>(),
                )
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| *n)
            .expect("palette is non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 3.0
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && [self.size, self.x0, self.y0].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for RenderDims {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
        }
    }
}

impl RenderDims {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn video_len(&self) -> usize {
        self.frames * self.frame_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub frames: Frames,
    pub motion: MotionSpec,
    pub appearance: AppearanceSpec,
    pub caption: String,
}

impl SyntheticVideo {
    pub fn first_frame(&self) -> Frame {
        self.frames.index_axis(ndarray::Axis(0), 0).to_owned()
    }
}

/// Renders the shape following `motion` for `dims.frames` frames on a zero
/// background. Pixel `(row, col)` is lit when its centre `(col+0.5, row+0.5)`
/// falls strictly inside the shape.
pub fn render_video(
    appearance: &AppearanceSpec,
    motion: &MotionSpec,
    dims: RenderDims,
) -> Result<Frames> {
    appearance.validate()?;
    motion.validate()?;
    if dims.frames < 2 {
        return Err(Error::InvalidSpec("a video needs at least 2 frames".into()));
    }
    let h = appearance.size / 2.0;
    let (w_f, h_f) = (dims.width as f64, dims.height as f64);
    let mut frames = Frames::zeros((dims.frames, dims.height, dims.width, 3));
    for t in 0..dims.frames {
        let (cx, cy) = motion.position(appearance.x0, appearance.y0, t as f64);
        if cx - h < 0.0 || cy - h < 0.0 || cx + h > w_f || cy + h > h_f {
            return Err(Error::EnvelopeOutOfBounds {
                frame: t,
                width: dims.width,
                height: dims.height,
            });
        }
        let r0 = (cy - h).floor().max(0.0) as usize;
        let r1 = ((cy + h).ceil() as usize).min(dims.height);
        let c0 = (cx - h).floor().max(0.0) as usize;
        let c1 = ((cx + h).ceil() as usize).min(dims.width);
        for row in r0..r1 {
            for col in c0..c1 {
                let dx = col as f64 + 0.5 - cx;
                let dy = row as f64 + 0.5 - cy;
                if appearance.shape.covers(appearance.size, dx, dy) {
                    for ch in 0..3 {
                        frames[[t, row, col, ch]] = appearance.color[ch];
                    }
                }
            }
        }
    }
    Ok(frames)
}

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Centroid (in continuous pixel coordinates) of the foreground of frame `t`,
/// or `None` when nothing exceeds the threshold.
pub fn foreground_centroid(frames: &Frames, t: usize) -> Option<(f64, f64)> {
    let (_, rows, cols, _) = frames.dim();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for r in 0..rows {
        for c in 0..cols {
            let lum = luminance(
                frames[[t, r, c, 0]],
                frames[[t, r, c, 1]],
                frames[[t, r, c, 2]],
            );
            if lum > FOREGROUND_THRESHOLD {
                sx += c as f64 + 0.5;
                sy += r as f64 + 0.5;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Speed adverbs, indexed by bin.
pub const SPEED_WORDS: [&str; 3] = ["slowly", "steadily", "quickly"];
/// Bin edges: pixels/frame for linear motion.
pub const LINEAR_SPEED_EDGES: [f64; 2] = [1.2, 2.2];
/// Bin edges: radians/frame for circular motion.
pub const CIRCULAR_SPEED_EDGES: [f64; 2] = [0.55, 0.8];
/// Bin edges: cycles/frame for oscillation.
pub const OSCILLATION_SPEED_EDGES: [f64; 2] = [0.18, 0.29];
/// Compass words counter-clockwise from "right" in 45° sectors (image y
/// points down, so negative `vy` reads as "up").
pub const DIRECTION_WORDS: [&str; 8] = [
    "right",
    "up-right",
    "up",
    "up-left",
    "left",
    "down-left",
    "down",
    "down-right",
];

/// Motion-phrase wording. The alternate vocabulary shares no motion word
/// with the standard one, for databases from a different caption domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vocabulary {
    #[default]
    Standard,
    Alternate,
}

pub const ALT_SPEED_WORDS: [&str; 3] = ["gently", "evenly", "briskly"];
pub const ALT_DIRECTION_WORDS: [&str; 8] = [
    "east",
    "northeast",
    "north",
    "northwest",
    "west",
    "southwest",
    "south",
    "southeast",
];

fn speed_bin(value: f64, edges: [f64; 2]) -> usize {
    edges.iter().filter(|e| value >= **e).count()
}

/// Discrete motion description underlying the caption's motion phrase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionBin {
    Linear { direction: usize, speed: usize },
    Circular { speed: usize },
    Oscillation { axis: OscillationAxis, speed: usize },
}

impl MotionBin {
    pub fn of(motion: &MotionSpec) -> Self {
        match *motion {
            MotionSpec::Linear { vx, vy } => {
                let angle = (-vy).atan2(vx).rem_euclid(2.0 * PI);
                let direction = ((angle / (PI / 4.0)).round() as usize) % 8;
                let speed = speed_bin(vx.hypot(vy), LINEAR_SPEED_EDGES);
                MotionBin::Linear { direction, speed }
            }
            MotionSpec::Circular { omega, .. } => MotionBin::Circular {
                speed: speed_bin(omega.abs(), CIRCULAR_SPEED_EDGES),
            },
            MotionSpec::Oscillation { freq, axis, .. } => MotionBin::Oscillation {
                axis,
                speed: speed_bin(freq, OSCILLATION_SPEED_EDGES),
            },
        }
    }

    pub fn phrase(&self) -> String {
        self.phrase_in(Vocabulary::Standard)
    }

    pub fn phrase_in(&self, vocabulary: Vocabulary) -> String {
        if vocabulary == Vocabulary::Alternate {
            return match *self {
                MotionBin::Linear { direction, speed } => {
                    format!(
                        "drifting {} {}",
                        ALT_DIRECTION_WORDS[direction], ALT_SPEED_WORDS[speed]
                    )
                }
                MotionBin::Circular { speed } => format!("orbiting {}", ALT_SPEED_WORDS[speed]),
                MotionBin::Oscillation {
                    axis: OscillationAxis::Horizontal,
                    speed,
                } => {
                    format!("swaying laterally {}", ALT_SPEED_WORDS[speed])
                }
                MotionBin::Oscillation {
                    axis: OscillationAxis::Vertical,
                    speed,
                } => {
                    format!("hopping vertically {}", ALT_SPEED_WORDS[speed])
                }
            };
        }
        match *self {
            MotionBin::Linear { direction, speed } => {
                format!(
                    "moving {} {}",
                    DIRECTION_WORDS[direction], SPEED_WORDS[speed]
                )
            }
            MotionBin::Circular { speed } => format!("moving in circles {}", SPEED_WORDS[speed]),
            MotionBin::Oscillation {
                axis: OscillationAxis::Horizontal,
                speed,
            } => {
                format!("bouncing side to side {}", SPEED_WORDS[speed])
            }
            MotionBin::Oscillation {
                axis: OscillationAxis::Vertical,
                speed,
            } => {
                format!("bobbing up and down {}", SPEED_WORDS[speed])
            }
        }
    }
}

/// `"a <color> <shape> <motion phrase>"`.
pub fn make_caption(appearance: &AppearanceSpec, motion: &MotionSpec) -> String {
    make_caption_in(Vocabulary::Standard, appearance, motion)
}

pub fn make_caption_in(
    vocabulary: Vocabulary,
    appearance: &AppearanceSpec,
    motion: &MotionSpec,
) -> String {
    let phrase = MotionBin::of(motion).phrase_in(vocabulary);
    format!(
        "a {} {} {phrase}",
        appearance.color_name(),
        appearance.shape.name()
    )
}

/// Legal parameter ranges the generator samples from uniformly.
#[derive(Clone, Copy, Debug)]
pub struct SamplingRanges {
    pub size: (f64, f64),
    pub linear_speed: (f64, f64),
    pub radius: (f64, f64),
    pub omega: (f64, f64),
    pub amplitude: (f64, f64),
    pub freq: (f64, f64),
}

impl SamplingRanges {
    /// Ranges scaled to the frame so the motion envelope always fits.
    pub fn for_dims(dims: RenderDims) -> Self {
        let side = dims.height.min(dims.width) as f64;
        let unit = side / 32.0;
        Self {
            size: (4.5 * unit, 7.5 * unit),
            linear_speed: (
                0.4 * unit,
                (0.8 * side / dims.frames as f64).max(0.5 * unit),
            ),
            radius: (3.0 * unit, 7.0 * unit),
            omega: (0.35, 1.0),
            amplitude: (3.0 * unit, 8.0 * unit),
            freq: (0.08, 0.4),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Rounds through `f32` so that values survive the 32-bit frames file.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

pub fn video_id(index: usize) -> String {
    format!("v{index:05}")
}

/// RNG for item `index` of a corpus generated from `seed`.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws the motion and appearance of item `index`; a pure function of
/// `(seed, index, dims)`.
pub fn sample_specs(seed: u64, index: usize, dims: RenderDims) -> (AppearanceSpec, MotionSpec) {
    let mut rng = item_rng(seed, index);
    let ranges = SamplingRanges::for_dims(dims);
    let (w, h) = (dims.width as f64, dims.height as f64);
    let span = (dims.frames - 1) as f64;
    loop {
        let shape = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        let (_, base) = PALETTE[rng.random_range(0..PALETTE.len())];
        let color = base.map(|c| {
            f32_exact((c + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0))
        });
        let size = uniform(&mut rng, ranges.size);
        let half = size / 2.0;
        let kind = rng.random_range(0..3);
        // Horizontal and vertical extents of the motion relative to the start.
        let (motion, (ex_lo, ex_hi), (ey_lo, ey_hi)) = match kind {
            0 => {
                let speed = uniform(&mut rng, ranges.linear_speed);
                let angle = rng.random_range(0.0..2.0 * PI);
                let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
                let dx = vx * span;
                let dy = vy * span;
                (
                    MotionSpec::Linear { vx, vy },
                    (dx.min(0.0), dx.max(0.0)),
                    (dy.min(0.0), dy.max(0.0)),
                )
            }
            1 => {
                let radius = uniform(&mut rng, ranges.radius);
                let omega = uniform(&mut rng, ranges.omega);
                let phase = rng.random_range(0.0..2.0 * PI);
                let (cx, cy) = (-radius * phase.cos(), -radius * phase.sin());
                (
                    MotionSpec::Circular {
                        radius,
                        omega,
                        phase,
                    },
                    (cx - radius, cx + radius),
                    (cy - radius, cy + radius),
                )
            }
            _ => {
                let amplitude = uniform(&mut rng, ranges.amplitude);
                let freq = uniform(&mut rng, ranges.freq);
                let axis = if rng.random_bool(0.5) {
                    OscillationAxis::Horizontal
                } else {
                    OscillationAxis::Vertical
                };
                let env = (-amplitude, amplitude);
                match axis {
                    OscillationAxis::Horizontal => (
                        MotionSpec::Oscillation {
                            amplitude,
                            freq,
                            axis,
                        },
                        env,
                        (0.0, 0.0),
                    ),
                    OscillationAxis::Vertical => (
                        MotionSpec::Oscillation {
                            amplitude,
                            freq,
                            axis,
                        },
                        (0.0, 0.0),
                        env,
                    ),
                }
            }
        };
        let x_range = (half - ex_lo, w - half - ex_hi);
        let y_range = (half - ey_lo, h - half - ey_hi);
        if x_range.0 > x_range.1 || y_range.0 > y_range.1 {
            continue;
        }
        let x0 = uniform(&mut rng, x_range);
        let y0 = uniform(&mut rng, y_range);
        return (
            AppearanceSpec {
                shape,
                color,
                size,
                x0,
                y0,
            },
            motion,
        );
    }
}

/// Builds item `index` in memory.
pub fn synthesize_video(seed: u64, index: usize, dims: RenderDims) -> Result<SyntheticVideo> {
    let (appearance, motion) = sample_specs(seed, index, dims);
    let frames = render_video(&appearance, &motion, dims)?;
    Ok(SyntheticVideo {
        id: video_id(index),
        caption: make_caption(&appearance, &motion),
        frames,
        motion,
        appearance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub caption: String,
    pub motion: MotionSpec,
    pub appearance: AppearanceSpec,
    /// Frames file relative to the corpus directory.
    pub frames: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub dims: RenderDims,
    pub entries: Vec<CorpusEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ManifestRecord {
    Header {
        version: u32,
        seed: u64,
        frames: usize,
        height: usize,
        width: usize,
        count: usize,
    },
    Video(CorpusEntry),
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::ManifestCorrupt(format!("duplicate id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        let header = ManifestRecord::Header {
            version: MANIFEST_VERSION,
            seed: self.seed,
            frames: self.dims.frames,
            height: self.dims.height,
            width: self.dims.width,
            count: self.entries.len(),
        };
        let mut line = |rec: &ManifestRecord| -> Result<()> {
            let text = serde_json::to_string(rec).expect("manifest records serialize");
            writeln!(w, "{text}").at(path)
        };
        line(&header)?;
        for e in &self.entries {
            line(&ManifestRecord::Video(e.clone()))?;
        }
        w.flush().at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::ManifestCorrupt("empty manifest".into()))?
            .at(path)?;
        let (seed, dims, count) = match serde_json::from_str(&first) {
            Ok(ManifestRecord::Header {
                version,
                seed,
                frames,
                height,
                width,
                count,
            }) => {
                if version != MANIFEST_VERSION {
                    return Err(Error::ManifestCorrupt(format!(
                        "unsupported manifest version {version}"
                    )));
                }
                (
                    seed,
                    RenderDims {
                        frames,
                        height,
                        width,
                    },
                    count,
                )
            }
            Ok(_) => {
                return Err(Error::ManifestCorrupt(
                    "first record is not a header".into(),
                ))
            }
            Err(e) => return Err(Error::ManifestCorrupt(format!("header: {e}"))),
        };
        let mut entries = Vec::with_capacity(count);
        for (n, line) in lines.enumerate() {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(ManifestRecord::Video(e)) => entries.push(e),
                Ok(_) => {
                    return Err(Error::ManifestCorrupt(format!(
                        "line {}: unexpected header",
                        n + 2
                    )))
                }
                Err(e) => return Err(Error::ManifestCorrupt(format!("line {}: {e}", n + 2))),
            }
        }
        if entries.len() != count {
            return Err(Error::ManifestCorrupt(format!(
                "header declares {count} videos, found {}",
                entries.len()
            )));
        }
        let manifest = Self {
            seed,
            dims,
            entries,
        };
        manifest.check_unique_ids()?;
        Ok(manifest)
    }
}

/// A corpus directory opened for reading; frames are loaded on demand.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    /// Opens and validates `dir`: unique ids, and every frames file present
    /// with the declared size.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = CorpusManifest::read(&root.join(MANIFEST_FILE))?;
        let expected = (16 + manifest.dims.video_len() * 4) as u64;
        for e in &manifest.entries {
            let path = root.join(&e.frames);
            let len = fs::metadata(&path).at(&path)?.len();
            if len != expected {
                return Err(Error::FrameShapeMismatch {
                    id: e.id.clone(),
                    detail: format!("{} bytes on disk, {expected} expected", len),
                });
            }
        }
        Ok(Self { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn dims(&self) -> RenderDims {
        self.manifest.dims
    }

    pub fn frames(&self, index: usize) -> Result<Frames> {
        let e = &self.manifest.entries[index];
        read_frames(&self.root.join(&e.frames), &e.id, self.manifest.dims)
    }

    pub fn video(&self, index: usize) -> Result<SyntheticVideo> {
        let e = &self.manifest.entries[index];
        Ok(SyntheticVideo {
            id: e.id.clone(),
            frames: self.frames(index)?,
            motion: e.motion,
            appearance: e.appearance,
            caption: e.caption.clone(),
        })
    }

    pub fn videos(&self) -> Result<Vec<SyntheticVideo>> {
        (0..self.len()).map(|i| self.video(i)).collect()
    }
}

/// Generates `n` videos and writes them under `out`.
pub fn generate_corpus(
    seed: u64,
    n: usize,
    dims: RenderDims,
    out: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    generate_corpus_in(Vocabulary::Standard, seed, n, dims, out)
}

/// Generates `n` videos captioned with `vocabulary` and writes them under `out`.
pub fn generate_corpus_in(
    vocabulary: Vocabulary,
    seed: u64,
    n: usize,
    dims: RenderDims,
    out: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    if n == 0 {
        return Err(Error::InvalidSpec("corpus size must be at least 1".into()));
    }
    let mut videos = (0..n)
        .map(|i| synthesize_video(seed, i, dims))
        .collect::<Result<Vec<_>>>()?;
    for v in &mut videos {
        v.caption = make_caption_in(vocabulary, &v.appearance, &v.motion);
    }
    save_corpus(seed, dims, &videos, out)
}

/// Writes `videos` as a corpus directory and returns its manifest.
pub fn save_corpus(
    seed: u64,
    dims: RenderDims,
    videos: &[SyntheticVideo],
    out: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    let out = out.as_ref();
    let frames_dir = out.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).at(&frames_dir)?;
    let mut entries = Vec::with_capacity(videos.len());
    for v in videos {
        let rel = format!("{FRAMES_DIR}/{}.mrv", v.id);
        write_frames(&out.join(&rel), &v.frames)?;
        entries.push(CorpusEntry {
            id: v.id.clone(),
            caption: v.caption.clone(),
            motion: v.motion,
            appearance: v.appearance,
            frames: rel,
        });
    }
    let manifest = CorpusManifest {
        seed,
        dims,
        entries,
    };
    manifest.check_unique_ids()?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn write_frames(path: &Path, frames: &Frames) -> Result<()> {
    let (t, h, w, c) = frames.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let mut bytes = Vec::with_capacity(16 + frames.len() * 4);
    bytes.extend_from_slice(FRAMES_MAGIC);
    for d in [t, h, w] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in frames.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).at(path)
}

pub fn read_frames(path: &Path, id: &str, dims: RenderDims) -> Result<Frames> {
    let mismatch = |detail: String| Error::FrameShapeMismatch {
        id: id.to_string(),
        detail,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .at(path)?
        .read_to_end(&mut bytes)
        .at(path)?;
    if bytes.len() < 16 || &bytes[..4] != FRAMES_MAGIC {
        return Err(mismatch("missing MRV1 header".into()));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (t, h, w) = (dim(0), dim(1), dim(2));
    if (t, h, w) != (dims.frames, dims.height, dims.width) {
        return Err(mismatch(format!(
            "header {t}x{h}x{w}, manifest {}x{}x{}",
            dims.frames, dims.height, dims.width
        )));
    }
    let payload = &bytes[16..];
    if payload.len() != dims.video_len() * 4 {
        return Err(mismatch(format!(
            "{} payload bytes, {} expected",
            payload.len(),
            dims.video_len() * 4
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Frames::from_shape_vec((t, h, w, 3), values).expect("length checked"))
}
