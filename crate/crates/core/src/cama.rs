//! Context-aware motion adaptation.
//!
//! Retrieved examples are laid out least-relevant first, each segment being
//! the element-wise sum of an appearance block and a motion block, and the
//! target image closes the sequence. A transformer under a block-causal mask
//! reads the sequence and a linear head turns the target segment into the
//! predicted motion tokens.

use std::rc::Rc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, Attention, FeedForward, Init, LayerNorm, Linear, INIT_STD};
use crate::params::{Bound, ParamSet};
use crate::resampler::check_layout;

/// How appearance and motion blocks are paired inside a segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    /// Segment for rank `n` carries `f_i(F_n) + f_m(V_{n+1})`; the least
    /// relevant example gets the learned null block and the target gets
    /// `f_i(I) + f_m(V_1)`.
    #[default]
    Shifted,
    /// Segment for rank `n` carries `f_i(F_n) + f_m(V_n)`; the target gets
    /// `f_i(I)` plus the null block.
    Aligned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctConfig {
    pub tokens: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub pairing: Pairing,
    /// Weight of the optional per-example motion prediction loss; 0 disables.
    pub aux_weight: f64,
}

impl Default for MctConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            width: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_seq_len: 200,
            pairing: Pairing::Shifted,
            aux_weight: 0.0,
        }
    }
}

/// One retrieved example; `rank` 1 is the most relevant.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextExample {
    pub appearance: Mat,
    pub motion: Mat,
    pub rank: usize,
}

/// Where a segment's appearance or motion block comes from. Example indices
/// are zero-based positions in relevance order (index 0 is rank 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Example(usize),
    Target,
    Null,
}

/// `(appearance, motion)` sources for each segment in processing order.
pub fn segment_plan(k: usize, pairing: Pairing) -> Vec<(Source, Source)> {
    let mut plan = Vec::with_capacity(k + 1);
    for n in (1..=k).rev() {
        let motion = match pairing {
            Pairing::Shifted if n == k => Source::Null,
            Pairing::Shifted => Source::Example(n),
            Pairing::Aligned => Source::Example(n - 1),
        };
        plan.push((Source::Example(n - 1), motion));
    }
    let target_motion = match pairing {
        Pairing::Shifted => Source::Example(0),
        Pairing::Aligned => Source::Null,
    };
    plan.push((Source::Target, target_motion));
    plan
}

/// Block-causal attention mask: `allowed[i][j]` iff the segment of key `j`
/// does not come after the segment of query `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCausalMask {
    pub allowed: Mask,
    pub segment_lengths: Vec<usize>,
}

pub fn build_block_causal_mask(segment_lengths: &[usize]) -> BlockCausalMask {
    let segment_of: Vec<usize> = segment_lengths
        .iter()
        .enumerate()
        .flat_map(|(s, len)| std::iter::repeat_n(s, *len))
        .collect();
    let n = segment_of.len();
    let allowed = Array2::from_shape_fn((n, n), |(i, j)| segment_of[j] <= segment_of[i]);
    BlockCausalMask {
        allowed: Rc::new(allowed),
        segment_lengths: segment_lengths.to_vec(),
    }
}

/// Assembled MCT input in processing order `[rank K, …, rank 1, target]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSequence {
    pub inputs: Mat,
    pub segment_lengths: Vec<usize>,
    /// Relevance rank per segment; `None` marks the target.
    pub ranks: Vec<Option<usize>>,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn segment(&self, s: usize) -> ndarray::ArrayView2<'_, f64> {
        let start: usize = self.segment_lengths[..s].iter().sum();
        self.inputs
            .slice(s![start..start + self.segment_lengths[s], ..])
    }
}

fn sorted_examples(examples: &[ContextExample]) -> Vec<&ContextExample> {
    let mut sorted: Vec<&ContextExample> = examples.iter().collect();
    sorted.sort_by_key(|e| e.rank);
    sorted
}

fn check_block(what: &str, m: &Mat, shape: (usize, usize)) -> Result<()> {
    if m.dim() != shape {
        return Err(Error::ShapeMismatch(format!(
            "{what} block is {:?}, expected {shape:?}",
            m.dim()
        )));
    }
    Ok(())
}

/// Lays out the context sequence. `examples` are ordered by their `rank`
/// field, 1 being the most relevant; `null_motion` fills the motion slot that
/// has no video behind it.
pub fn build_sequence(
    examples: &[ContextExample],
    target_appearance: &Mat,
    null_motion: &Mat,
    pairing: Pairing,
) -> Result<ContextSequence> {
    if examples.is_empty() {
        return Err(Error::EmptyContext);
    }
    let shape = target_appearance.dim();
    check_block("null motion", null_motion, shape)?;
    let sorted = sorted_examples(examples);
    for e in &sorted {
        check_block("example appearance", &e.appearance, shape)?;
        check_block("example motion", &e.motion, shape)?;
    }
    let plan = segment_plan(sorted.len(), pairing);
    let mut inputs = Mat::zeros((plan.len() * shape.0, shape.1));
    let mut ranks = Vec::with_capacity(plan.len());
    for (seg, (app, mot)) in plan.iter().enumerate() {
        let a = match app {
            Source::Example(i) => &sorted[*i].appearance,
            Source::Target => target_appearance,
            Source::Null => unreachable!("appearance is never null"),
        };
        let m = match mot {
            Source::Example(i) => &sorted[*i].motion,
            Source::Null => null_motion,
            Source::Target => unreachable!("target motion is what gets predicted"),
        };
        inputs
            .slice_mut(s![seg * shape.0..(seg + 1) * shape.0, ..])
            .assign(&(a + m));
        ranks.push(match app {
            Source::Example(i) => Some(sorted[*i].rank),
            _ => None,
        });
    }
    Ok(ContextSequence {
        inputs,
        segment_lengths: vec![shape.0; plan.len()],
        ranks,
    })
}

/// Mean squared error over all `L·d` entries.
pub fn transfer_loss(pred: &Mat, target: &Mat) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug)]
struct Layer {
    attn_norm: LayerNorm,
    attention: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Forward results on the value level.
#[derive(Clone, Debug, PartialEq)]
pub struct MctOutput {
    /// Residual stream after the last layer, one row per sequence token.
    pub hidden: Mat,
    /// `L × d` predicted motion tokens read from the target segment.
    pub prediction: Mat,
}

/// Loss and gradients for one training sequence.
#[derive(Clone, Debug)]
pub struct MctGradients {
    pub loss: f64,
    pub params: Vec<Mat>,
    /// Gradient with respect to the assembled sequence inputs.
    pub inputs: Mat,
}

/// In-graph results of [`MotionContextTransformer::forward`].
pub struct MctNodes {
    pub hidden: Var,
    pub prediction: Var,
    /// Head applied to every row; only set when requested.
    pub all_predictions: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MotionContextTransformer {
    cfg: MctConfig,
    params: ParamSet,
    null_motion: usize,
    layers: Vec<Layer>,
    final_norm: LayerNorm,
    head: Linear,
    positions: Mat,
}

impl MotionContextTransformer {
    pub fn new(cfg: MctConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let null_motion = p.normal("null_motion", (cfg.tokens, cfg.width), INIT_STD, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("layer{l}");
                Layer {
                    attn_norm: LayerNorm::new(&mut p, &format!("{name}.attn_norm"), cfg.width),
                    attention: Attention::new(
                        &mut p,
                        &format!("{name}.attn"),
                        cfg.width,
                        cfg.width,
                        cfg.width,
                        cfg.width,
                        cfg.heads,
                        false,
                        Init::Small,
                        rng,
                    ),
                    ff_norm: LayerNorm::new(&mut p, &format!("{name}.ff_norm"), cfg.width),
                    ff: FeedForward::new(
                        &mut p,
                        &format!("{name}.ff"),
                        cfg.width,
                        cfg.ff_dim,
                        Init::Small,
                        rng,
                    ),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut p, "final_norm", cfg.width);
        let head = Linear::new(&mut p, "head", cfg.width, cfg.width, true, Init::Small, rng);
        let positions = sinusoid_table(cfg.max_seq_len, cfg.width);
        Self {
            cfg,
            params: p,
            null_motion,
            layers,
            final_norm,
            head,
            positions,
        }
    }

    pub fn from_params(cfg: MctConfig, params: ParamSet) -> Result<Self> {
        let mut fresh = Self::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        check_layout(&fresh.params, &params)?;
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &MctConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn null_motion(&self) -> &Mat {
        self.params.get(self.null_motion)
    }

    pub fn null_motion_slot(&self) -> usize {
        self.null_motion
    }

    /// Largest example count whose sequence fits `max_seq_len`.
    pub fn max_examples(&self) -> usize {
        (self.cfg.max_seq_len / self.cfg.tokens).saturating_sub(1)
    }

    /// Builds the sequence on the tape from per-example appearance and motion
    /// nodes (index 0 = rank 1) and the target appearance node.
    pub fn assemble(
        &self,
        g: &mut Graph,
        p: &Bound,
        appearances: &[Var],
        motions: &[Var],
        target_appearance: Var,
    ) -> Var {
        let plan = segment_plan(appearances.len(), self.cfg.pairing);
        let segments: Vec<Var> = plan
            .iter()
            .map(|(app, mot)| {
                let a = match app {
                    Source::Example(i) => appearances[*i],
                    _ => target_appearance,
                };
                let m = match mot {
                    Source::Example(i) => motions[*i],
                    _ => p[self.null_motion],
                };
                g.add(a, m)
            })
            .collect();
        g.concat_rows(&segments)
    }

    /// Masked transformer over `inputs` (sequence rows × width).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: Var,
        mask: &Mask,
        all_rows: bool,
    ) -> MctNodes {
        let (n, _) = g.shape(inputs);
        let pos = g.constant(self.positions.slice(s![..n, ..]).to_owned());
        let mut h = g.add(inputs, pos);
        for layer in &self.layers {
            let hn = layer.attn_norm.forward(g, p, h);
            let attended = layer.attention.forward(g, p, hn, hn, Some(mask));
            h = g.add(h, attended);
            let hn = layer.ff_norm.forward(g, p, h);
            let ff = layer.ff.forward(g, p, hn);
            h = g.add(h, ff);
        }
        let l = self.cfg.tokens;
        let (prediction, all_predictions) = if all_rows {
            let normed = self.final_norm.forward(g, p, h);
            let all = self.head.forward(g, p, normed);
            (g.slice_rows(all, n - l, l), Some(all))
        } else {
            let tail = g.slice_rows(h, n - l, l);
            let normed = self.final_norm.forward(g, p, tail);
            (self.head.forward(g, p, normed), None)
        };
        MctNodes {
            hidden: h,
            prediction,
            all_predictions,
        }
    }

    fn check_sequence(&self, seq: &ContextSequence) -> Result<()> {
        let n = seq.len();
        let layout_ok = seq.segment_lengths.iter().sum::<usize>() == n
            && seq.segment_lengths.last() == Some(&self.cfg.tokens)
            && seq.inputs.ncols() == self.cfg.width;
        if !layout_ok {
            return Err(Error::ShapeMismatch(format!(
                "sequence {:?} with segments {:?} does not fit L={} d={}",
                seq.inputs.dim(),
                seq.segment_lengths,
                self.cfg.tokens,
                self.cfg.width
            )));
        }
        if n > self.cfg.max_seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {n} exceeds {}",
                self.cfg.max_seq_len
            )));
        }
        Ok(())
    }

    /// Hidden states and predicted motion tokens for an assembled sequence.
    pub fn predict(&self, seq: &ContextSequence) -> Result<MctOutput> {
        self.check_sequence(seq)?;
        let mask = build_block_causal_mask(&seq.segment_lengths);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(seq.inputs.clone());
        let out = self.forward(&mut g, &p, x, &mask.allowed, false);
        Ok(MctOutput {
            hidden: g.value(out.hidden).clone(),
            prediction: g.value(out.prediction).clone(),
        })
    }

    /// Predicted motion tokens from examples and the target's appearance.
    pub fn adapt(&self, examples: &[ContextExample], target_appearance: &Mat) -> Result<Mat> {
        let seq = build_sequence(
            examples,
            target_appearance,
            self.null_motion(),
            self.cfg.pairing,
        )?;
        Ok(self.predict(&seq)?.prediction)
    }

    /// Transfer loss against `target_motion` and its gradients with respect to
    /// every parameter (including the null block) and to the sequence inputs.
    pub fn gradients(
        &self,
        examples: &[ContextExample],
        target_appearance: &Mat,
        target_motion: &Mat,
    ) -> Result<MctGradients> {
        let seq = build_sequence(
            examples,
            target_appearance,
            self.null_motion(),
            self.cfg.pairing,
        )?;
        self.check_sequence(&seq)?;
        check_block("target motion", target_motion, target_appearance.dim())?;
        let sorted = sorted_examples(examples);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let apps: Vec<Var> = sorted
            .iter()
            .map(|e| g.param(e.appearance.clone()))
            .collect();
        let mots: Vec<Var> = sorted.iter().map(|e| g.param(e.motion.clone())).collect();
        let target_app = g.param(target_appearance.clone());
        let inputs = self.assemble(&mut g, &p, &apps, &mots, target_app);
        let mask = build_block_causal_mask(&seq.segment_lengths);
        let out = self.forward(&mut g, &p, inputs, &mask.allowed, false);
        let target = g.constant(target_motion.clone());
        let loss = g.mse(out.prediction, target);
        let grads = g.backward(loss);
        Ok(MctGradients {
            loss: g.scalar(loss),
            params: self.params.gradients(&grads, &p),
            inputs: grads.get_or_zeros(inputs, seq.inputs.dim()),
        })
    }
}
