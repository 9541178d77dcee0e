//! Toy conditional video diffusion model.
//!
//! Videos are handled as patch tokens: every frame is cut into `P×P` patches,
//! giving `T·(H/P)·(W/P)` tokens of `P·P·3` values. The denoiser predicts the
//! clean video `x̂_0` from a noisy one, conditioned on the first frame and,
//! through residual Motion-Adapter cross-attention, on motion tokens.

use ndarray::{s, Array, Axis, Dimension, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{Frame, Frames};
use crate::encoders::{patchify, unpatchify};
use crate::error::{Error, Result};
use crate::nn::{grid_sinusoid_table, sinusoid, Attention, FeedForward, Init, LayerNorm, Linear};
use crate::params::{Bound, ParamSet};
use crate::resampler::check_layout;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Denoiser width `d_g`.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Width of the dense image features used for image cross-attention.
    pub image_dim: usize,
    /// Width `d` of the motion tokens.
    pub motion_dim: usize,
    /// Adapter attention width `d_a`.
    pub adapter_dim: usize,
    pub adapter_heads: usize,
    pub adapter_scale: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Length of the fine grid on which the linear betas are defined before
    /// being subsampled to `diffusion_steps`.
    pub reference_steps: usize,
    pub sample_steps: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            patch: 8,
            hidden: 64,
            blocks: 3,
            heads: 4,
            ff_dim: 128,
            image_dim: 64,
            motion_dim: 64,
            adapter_dim: 64,
            adapter_heads: 4,
            adapter_scale: 1.0,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            reference_steps: 1000,
            sample_steps: 10,
        }
    }
}

impl GeneratorConfig {
    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn token_count(&self) -> usize {
        self.frames * self.patches_per_frame()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.height.is_multiple_of(self.patch)
            && self.width.is_multiple_of(self.patch)
            && self.frames >= 2
            && self.hidden.is_multiple_of(self.heads.max(1))
            && self.adapter_dim.is_multiple_of(self.adapter_heads.max(1))
            && self.adapter_scale >= 0.0
            && self.diffusion_steps >= 1
            && self.reference_steps >= self.diffusion_steps
            && self.sample_steps >= 1
            && self.sample_steps <= self.diffusion_steps
            && 0.0 < self.beta_start
            && self.beta_start < self.beta_end
            && self.beta_end < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "inconsistent generator configuration {self:?}"
            )))
        }
    }
}

/// Variance schedule with cumulative products `ᾱ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `reference_steps`,
    /// subsampled to `steps` evenly spaced points. With
    /// `reference_steps == steps` this is the plain linear schedule.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, reference_steps: usize) -> Self {
        assert!(steps >= 1 && reference_steps >= steps);
        let span = (reference_steps - 1).max(1) as f64;
        let mut cumulative = Vec::with_capacity(reference_steps);
        let mut prod = 1.0;
        for i in 0..reference_steps {
            prod *= 1.0 - (beta_start + (beta_end - beta_start) * i as f64 / span);
            cumulative.push(prod);
        }
        let alpha_bars: Vec<f64> = (0..steps)
            .map(|t| cumulative[(t + 1) * reference_steps / steps - 1])
            .collect();
        let betas = alpha_bars
            .iter()
            .enumerate()
            .map(|(t, a)| 1.0 - a / if t == 0 { 1.0 } else { alpha_bars[t - 1] })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn from_config(cfg: &GeneratorConfig) -> Self {
        Self::linear(
            cfg.diffusion_steps,
            cfg.beta_start,
            cfg.beta_end,
            cfg.reference_steps,
        )
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::StepOutOfRange {
                step: t,
                steps: self.steps(),
            })
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn diffuse<D: Dimension>(
        &self,
        x0: &Array<f64, D>,
        t: usize,
        noise: &Array<f64, D>,
    ) -> Result<Array<f64, D>> {
        let a = self.alpha_bar(t)?;
        if x0.shape() != noise.shape() {
            return Err(Error::ShapeMismatch(format!(
                "x0 {:?} vs noise {:?}",
                x0.shape(),
                noise.shape()
            )));
        }
        let (ca, cn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(Zip::from(x0).and(noise).map_collect(|x, n| ca * x + cn * n))
    }
}

pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    x0: &Frames,
    t: usize,
    noise: &Frames,
) -> Result<Frames> {
    schedule.diffuse(x0, t, noise)
}

/// `T·N_p × P·P·3` patch tokens, frame-major.
pub fn video_to_tokens(frames: &Frames, patch: usize) -> Result<Mat> {
    let per_frame: Vec<Mat> = frames
        .axis_iter(Axis(0))
        .map(|f| patchify(f, patch))
        .collect::<Result<_>>()?;
    let views: Vec<_> = per_frame.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn tokens_to_video(tokens: &Mat, cfg: &GeneratorConfig) -> Frames {
    let n = cfg.patches_per_frame();
    let mut frames = Frames::zeros((cfg.frames, cfg.height, cfg.width, 3));
    for t in 0..cfg.frames {
        let patches = tokens.slice(s![t * n..(t + 1) * n, ..]).to_owned();
        frames
            .index_axis_mut(Axis(0), t)
            .assign(&unpatchify(&patches, cfg.height, cfg.width, cfg.patch));
    }
    frames
}

/// What the generator knows about the input image: its pixels and the frozen
/// image encoder's dense features of it.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCondition {
    pub frame: Frame,
    pub features: Mat,
}

#[derive(Clone, Debug)]
struct Block {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    params: ParamSet,
    input: Linear,
    time_up: Linear,
    time_down: Linear,
    image_proj: Linear,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    output: Linear,
}

impl Denoiser {
    fn new(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let d = cfg.hidden;
        let input = Linear::new(
            &mut p,
            "input",
            2 * cfg.patch_dim(),
            d,
            true,
            Init::Small,
            rng,
        );
        let time_up = Linear::new(&mut p, "time.up", d, d, true, Init::Small, rng);
        let time_down = Linear::new(&mut p, "time.down", d, d, true, Init::Small, rng);
        let image_proj = Linear::new(&mut p, "image", cfg.image_dim, d, true, Init::Small, rng);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let name = format!("block{b}");
                Block {
                    self_norm: LayerNorm::new(&mut p, &format!("{name}.self_norm"), d),
                    self_attn: Attention::new(
                        &mut p,
                        &format!("{name}.self"),
                        d,
                        d,
                        d,
                        d,
                        cfg.heads,
                        false,
                        Init::Small,
                        rng,
                    ),
                    cross_norm: LayerNorm::new(&mut p, &format!("{name}.cross_norm"), d),
                    cross_attn: Attention::new(
                        &mut p,
                        &format!("{name}.cross"),
                        d,
                        d,
                        d,
                        d,
                        cfg.heads,
                        false,
                        Init::Small,
                        rng,
                    ),
                    ff_norm: LayerNorm::new(&mut p, &format!("{name}.ff_norm"), d),
                    ff: FeedForward::new(
                        &mut p,
                        &format!("{name}.ff"),
                        d,
                        cfg.ff_dim,
                        Init::Small,
                        rng,
                    ),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(&mut p, "out_norm", d);
        let output = Linear::new(&mut p, "output", d, cfg.patch_dim(), true, Init::Small, rng);
        Self {
            params: p,
            input,
            time_up,
            time_down,
            image_proj,
            blocks,
            out_norm,
            output,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

#[derive(Clone, Debug)]
struct AdapterSite {
    attention: Attention,
}

/// One residual cross-attention per denoiser block; output projections start
/// at exactly zero.
#[derive(Clone, Debug)]
pub struct MotionAdapters {
    params: ParamSet,
    sites: Vec<AdapterSite>,
    pub scale: f64,
}

impl MotionAdapters {
    fn new(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let sites = (0..cfg.blocks)
            .map(|b| AdapterSite {
                attention: Attention::new(
                    &mut p,
                    &format!("adapter{b}"),
                    cfg.hidden,
                    cfg.motion_dim,
                    cfg.adapter_dim,
                    cfg.hidden,
                    cfg.adapter_heads,
                    true,
                    Init::FanIn,
                    rng,
                ),
            })
            .collect();
        Self {
            params: p,
            sites,
            scale: cfg.adapter_scale,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn sites(&self) -> usize {
        self.sites.len()
    }

    /// In-graph `Z + s·Attn(Z W_q, M W_k, M W_v) W_o` at site `i`.
    pub fn inject(&self, g: &mut Graph, p: &Bound, site: usize, z: Var, motion: Var) -> Var {
        if self.scale == 0.0 {
            return z;
        }
        let attended = self.sites[site].attention.forward(g, p, z, motion, None);
        let scaled = if self.scale == 1.0 {
            attended
        } else {
            g.scale(attended, self.scale)
        };
        g.add(z, scaled)
    }

    /// Value-level adapter attention at site `i`.
    pub fn attend(&self, site: usize, z: &Mat, motion: &Mat) -> Result<Mat> {
        let a = self
            .sites
            .get(site)
            .ok_or_else(|| Error::ShapeMismatch(format!("no adapter site {site}")))?;
        let (qd, kd) = (
            a.attention.query.input_dim(&self.params),
            a.attention.key.input_dim(&self.params),
        );
        if z.ncols() != qd || motion.ncols() != kd || motion.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "adapter expects Z with {qd} and M with {kd} columns, got {:?} and {:?}",
                z.dim(),
                motion.dim()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let mv = g.constant(motion.clone());
        let out = self.inject(&mut g, &p, site, zv, mv);
        Ok(g.value(out).clone())
    }
}

/// Value-level Motion-Adapter step, `Z' = Z + s·Attn(Q, K, V)·W_o`.
pub fn adapter_attention(
    z: &Mat,
    motion: &Mat,
    adapters: &MotionAdapters,
    site: usize,
) -> Result<Mat> {
    adapters.attend(site, z, motion)
}

/// Gradients for one denoising loss evaluation.
#[derive(Clone, Debug)]
pub struct GeneratorGradients {
    pub loss: f64,
    pub denoiser: Vec<Mat>,
    pub adapters: Vec<Mat>,
    /// Gradient with respect to the motion tokens, when they were given.
    pub motion: Option<Mat>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    adapters: MotionAdapters,
    positions: Mat,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let denoiser = Denoiser::new(&cfg, rng);
        let adapters = MotionAdapters::new(&cfg, rng);
        let positions = grid_sinusoid_table(
            &[cfg.frames, cfg.height / cfg.patch, cfg.width / cfg.patch],
            cfg.hidden,
        );
        Ok(Self {
            schedule: NoiseSchedule::from_config(&cfg),
            cfg,
            denoiser,
            adapters,
            positions,
        })
    }

    pub fn from_params(
        cfg: GeneratorConfig,
        denoiser: ParamSet,
        adapters: ParamSet,
    ) -> Result<Self> {
        let mut fresh = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&fresh.denoiser.params, &denoiser)?;
        check_layout(&fresh.adapters.params, &adapters)?;
        fresh.denoiser.params = denoiser;
        fresh.adapters.params = adapters;
        Ok(fresh)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn adapters(&self) -> &MotionAdapters {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut MotionAdapters {
        &mut self.adapters
    }

    pub fn denoiser_params_mut(&mut self) -> &mut ParamSet {
        &mut self.denoiser.params
    }

    pub fn adapter_params_mut(&mut self) -> &mut ParamSet {
        &mut self.adapters.params
    }

    fn check_condition(&self, cond: &ImageCondition, motion: Option<&Mat>) -> Result<()> {
        let c = &self.cfg;
        if cond.frame.dim() != (c.height, c.width, 3) {
            return Err(Error::ShapeMismatch(format!(
                "condition frame {:?}",
                cond.frame.dim()
            )));
        }
        if cond.features.ncols() != c.image_dim || cond.features.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image features {:?}",
                cond.features.dim()
            )));
        }
        if let Some(m) = motion {
            if m.ncols() != c.motion_dim || m.nrows() == 0 {
                return Err(Error::ShapeMismatch(format!("motion tokens {:?}", m.dim())));
            }
        }
        Ok(())
    }

    fn check_video(&self, x: &Mat) -> Result<()> {
        if x.dim() != (self.cfg.token_count(), self.cfg.patch_dim()) {
            return Err(Error::ShapeMismatch(format!("video tokens {:?}", x.dim())));
        }
        Ok(())
    }

    /// Conditioning frame patches repeated for every frame.
    fn condition_tokens(&self, frame: &Frame) -> Result<Mat> {
        let patches = patchify(frame.view(), self.cfg.patch)?;
        let views = vec![patches.view(); self.cfg.frames];
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    /// In-graph `x̂_0` tokens from noisy tokens `x_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        pd: &Bound,
        pa: &Bound,
        x_t: Var,
        t: usize,
        cond: &ImageCondition,
        motion: Option<Var>,
    ) -> Result<Var> {
        let dn = &self.denoiser;
        let cond_tokens = g.constant(self.condition_tokens(&cond.frame)?);
        let joined = g.concat_cols(&[x_t, cond_tokens]);
        let h = dn.input.forward(g, pd, joined);
        let pos = g.constant(self.positions.clone());
        let mut h = g.add(h, pos);
        let mut temb = Mat::zeros((1, self.cfg.hidden));
        sinusoid(
            t as f64,
            self.cfg.hidden,
            temb.as_slice_mut().expect("standard layout"),
        );
        let temb = g.constant(temb);
        let temb = dn.time_up.forward(g, pd, temb);
        let temb = g.gelu(temb);
        let temb = dn.time_down.forward(g, pd, temb);
        h = g.add_row(h, temb);
        let image_features = g.constant(cond.features.clone());
        let image = dn.image_proj.forward(g, pd, image_features);
        for (i, block) in dn.blocks.iter().enumerate() {
            let hn = block.self_norm.forward(g, pd, h);
            let sa = block.self_attn.forward(g, pd, hn, hn, None);
            h = g.add(h, sa);
            let hn = block.cross_norm.forward(g, pd, h);
            let ca = block.cross_attn.forward(g, pd, hn, image, None);
            h = g.add(h, ca);
            if let Some(m) = motion {
                h = self.adapters.inject(g, pa, i, h, m);
            }
            let hn = block.ff_norm.forward(g, pd, h);
            let ff = block.ff.forward(g, pd, hn);
            h = g.add(h, ff);
        }
        let hn = dn.out_norm.forward(g, pd, h);
        let delta = dn.output.forward(g, pd, hn);
        Ok(g.add(delta, cond_tokens))
    }

    /// One network evaluation on token-space input.
    pub fn denoise_tokens(
        &self,
        x_t: &Mat,
        t: usize,
        cond: &ImageCondition,
        motion: Option<&Mat>,
    ) -> Result<Mat> {
        self.schedule.alpha_bar(t)?;
        self.check_video(x_t)?;
        self.check_condition(cond, motion)?;
        let mut g = Graph::new();
        let pd = self.denoiser.params.bind(&mut g, false);
        let pa = self.adapters.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let m = motion.map(|m| g.constant(m.clone()));
        let out = self.forward(&mut g, &pd, &pa, x, t, cond, m)?;
        Ok(g.value(out).clone())
    }

    /// Clean-video estimate `x̂_0` for a noisy video.
    pub fn denoise(
        &self,
        x_t: &Frames,
        t: usize,
        cond: &ImageCondition,
        motion: Option<&Mat>,
    ) -> Result<Frames> {
        let tokens = video_to_tokens(x_t, self.cfg.patch)?;
        Ok(tokens_to_video(
            &self.denoise_tokens(&tokens, t, cond, motion)?,
            &self.cfg,
        ))
    }

    /// `MSE(x̂_0, x0)` at step `t` with the given noise, and its gradients.
    pub fn gradients(
        &self,
        x0: &Mat,
        t: usize,
        noise: &Mat,
        cond: &ImageCondition,
        motion: Option<&Mat>,
    ) -> Result<GeneratorGradients> {
        let x_t = self.schedule.diffuse(x0, t, noise)?;
        self.check_video(&x_t)?;
        self.check_condition(cond, motion)?;
        let mut g = Graph::new();
        let pd = self.denoiser.params.bind(&mut g, true);
        let pa = self.adapters.params.bind(&mut g, true);
        let x = g.constant(x_t);
        let m = motion.map(|m| g.param(m.clone()));
        let out = self.forward(&mut g, &pd, &pa, x, t, cond, m)?;
        let target = g.constant(x0.clone());
        let loss = g.mse(out, target);
        let grads = g.backward(loss);
        Ok(GeneratorGradients {
            loss: g.scalar(loss),
            denoiser: self.denoiser.params.gradients(&grads, &pd),
            adapters: self.adapters.params.gradients(&grads, &pa),
            motion: m.map(|v| grads.get_or_zeros(v, motion.map(|m| m.dim()).unwrap_or_default())),
        })
    }

    /// Denoising loss only.
    pub fn loss(
        &self,
        x0: &Mat,
        t: usize,
        noise: &Mat,
        cond: &ImageCondition,
        motion: Option<&Mat>,
    ) -> Result<f64> {
        let x_t = self.schedule.diffuse(x0, t, noise)?;
        let pred = self.denoise_tokens(&x_t, t, cond, motion)?;
        Ok(pred
            .iter()
            .zip(x0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x0.len() as f64)
    }

    /// Timesteps visited by the sampler, highest first.
    pub fn sampling_steps(&self, steps: usize) -> Vec<usize> {
        let total = self.schedule.steps();
        let steps = steps.clamp(1, total);
        (0..steps)
            .map(|i| (steps - i) * total / steps - 1)
            .collect()
    }

    /// Deterministic sampler: starts from seeded Gaussian noise at the last
    /// step and walks the `x̂_0`-parameterised update down to a clean video.
    pub fn sample(
        &self,
        cond: &ImageCondition,
        motion: Option<&Mat>,
        steps: usize,
        seed: u64,
    ) -> Result<Frames> {
        if steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        self.check_condition(cond, motion)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (self.cfg.token_count(), self.cfg.patch_dim());
        let mut x = Mat::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        let ts = self.sampling_steps(steps);
        for (i, &t) in ts.iter().enumerate() {
            let x0 = self.denoise_tokens(&x, t, cond, motion)?;
            let Some(&prev) = ts.get(i + 1) else {
                x = x0;
                break;
            };
            let a = self.schedule.alpha_bars[t];
            let a_prev = self.schedule.alpha_bars[prev];
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            let (pa, pn) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
            Zip::from(&mut x).and(&x0).for_each(|xt, x0| {
                let eps = (*xt - sa * x0) / sn;
                *xt = pa * x0 + pn * eps;
            });
        }
        x.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(tokens_to_video(&x, &self.cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            frames: 2,
            height: 8,
            width: 8,
            patch: 4,
            hidden: 8,
            blocks: 2,
            heads: 2,
            ff_dim: 8,
            image_dim: 5,
            motion_dim: 6,
            adapter_dim: 4,
            adapter_heads: 2,
            diffusion_steps: 10,
            reference_steps: 10,
            sample_steps: 3,
            ..Default::default()
        }
    }

    fn condition(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> ImageCondition {
        ImageCondition {
            frame: Frame::from_shape_fn((cfg.height, cfg.width, 3), |_| rng.random_range(0.0..1.0)),
            features: Mat::from_shape_fn((3, cfg.image_dim), |_| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn schedule_is_monotone_and_reaches_low_signal() {
        let s = NoiseSchedule::from_config(&GeneratorConfig::default());
        assert_eq!(s.steps(), 50);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        assert!(*s.alpha_bars.last().unwrap() < 1e-3);
        let plain = NoiseSchedule::linear(50, 1e-4, 0.02, 50);
        assert!((plain.betas[0] - 1e-4).abs() < 1e-15);
        assert!((plain.betas[49] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn diffuse_edge_cases() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02, 10);
        let x0 = Frames::from_elem((2, 4, 4, 3), 0.5);
        let zero = Frames::zeros(x0.dim());
        let out = forward_diffuse(&s, &x0, 3, &zero).unwrap();
        assert_eq!(out, x0.mapv(|v| s.alpha_bars[3].sqrt() * v));
        assert!(matches!(
            forward_diffuse(&s, &x0, 10, &zero),
            Err(Error::StepOutOfRange {
                step: 10,
                steps: 10
            })
        ));
    }

    #[test]
    fn zero_output_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_config();
        let gen = Generator::new(cfg, &mut rng).unwrap();
        let z = Mat::from_shape_fn((5, cfg.hidden), |_| rng.random_range(-1.0..1.0));
        let m = Mat::from_shape_fn((4, cfg.motion_dim), |_| rng.random_range(-1.0..1.0));
        assert_eq!(adapter_attention(&z, &m, gen.adapters(), 1).unwrap(), z);
        assert!(adapter_attention(&z, &Mat::zeros((4, 3)), gen.adapters(), 0).is_err());
    }

    #[test]
    fn motion_is_a_no_op_at_initialisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config();
        let gen = Generator::new(cfg, &mut rng).unwrap();
        let cond = condition(&cfg, &mut rng);
        let m = Mat::from_shape_fn((4, cfg.motion_dim), |_| rng.random_range(-1.0..1.0));
        let x = Mat::from_shape_fn((cfg.token_count(), cfg.patch_dim()), |_| {
            rng.random_range(-1.0..1.0)
        });
        assert_eq!(
            gen.denoise_tokens(&x, 5, &cond, Some(&m)).unwrap(),
            gen.denoise_tokens(&x, 5, &cond, None).unwrap()
        );
        let a = gen.sample(&cond, Some(&m), 3, 11).unwrap();
        assert_eq!(a, gen.sample(&cond, None, 3, 11).unwrap());
        assert_eq!(a, gen.sample(&cond, Some(&m), 3, 11).unwrap());
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.dim(), (2, 8, 8, 3));
    }

    #[test]
    fn sampler_visits_descending_steps() {
        let gen = Generator::new(
            GeneratorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(
            gen.sampling_steps(10),
            vec![49, 44, 39, 34, 29, 24, 19, 14, 9, 4]
        );
        assert_eq!(gen.sampling_steps(1), vec![49]);
    }

    #[test]
    fn tokens_round_trip_to_video() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Frames::from_shape_fn((2, 8, 8, 3), |_| rng.random_range(0.0..1.0));
        assert_eq!(tokens_to_video(&video_to_tokens(&v, 4).unwrap(), &cfg), v);
    }
}
