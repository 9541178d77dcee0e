//! Perceiver-style resampler: `L` learned queries cross-attend over a
//! variable-length feature set and come out as exactly `L` tokens of width
//! `d`. One instance distils video features into motion tokens, a parallel
//! one distils frame features into appearance tokens.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, Init, LayerNorm, Linear, INIT_STD};
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResamplerConfig {
    /// Output token count `L`.
    pub tokens: usize,
    /// Output width `d`.
    pub width: usize,
    pub input_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            width: 64,
            input_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
        }
    }
}

/// `L × d` motion tokens `f_m(V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTokens(pub Mat);

/// `L × d` appearance tokens `f_i(F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceTokens(pub Mat);

#[derive(Clone, Debug)]
struct Layer {
    query_norm: LayerNorm,
    input_norm: LayerNorm,
    attention: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Resampler {
    cfg: ResamplerConfig,
    params: ParamSet,
    queries: usize,
    input_proj: Linear,
    layers: Vec<Layer>,
    out_norm: LayerNorm,
}

impl Resampler {
    pub fn new(cfg: ResamplerConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let queries = p.normal("queries", (cfg.tokens, cfg.width), INIT_STD, rng);
        let input_proj = Linear::new(
            &mut p,
            "input",
            cfg.input_dim,
            cfg.width,
            true,
            Init::Small,
            rng,
        );
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("layer{l}");
                Layer {
                    query_norm: LayerNorm::new(&mut p, &format!("{name}.query_norm"), cfg.width),
                    input_norm: LayerNorm::new(&mut p, &format!("{name}.input_norm"), cfg.width),
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
        let out_norm = LayerNorm::new(&mut p, "out_norm", cfg.width);
        Self {
            cfg,
            params: p,
            queries,
            input_proj,
            layers,
            out_norm,
        }
    }

    /// Rebuilds a resampler around stored parameters, checking their layout.
    pub fn from_params(cfg: ResamplerConfig, params: ParamSet) -> Result<Self> {
        let mut fresh = Self::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        check_layout(&fresh.params, &params)?;
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &ResamplerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// In-graph forward pass over an `N × input_dim` node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: Var) -> Var {
        let kv = self.input_proj.forward(g, p, inputs);
        let mut q = p[self.queries];
        for layer in &self.layers {
            let qn = layer.query_norm.forward(g, p, q);
            let kvn = layer.input_norm.forward(g, p, kv);
            let attended = layer.attention.forward(g, p, qn, kvn, None);
            q = g.add(q, attended);
            let hn = layer.ff_norm.forward(g, p, q);
            let ff = layer.ff.forward(g, p, hn);
            q = g.add(q, ff);
        }
        self.out_norm.forward(g, p, q)
    }

    fn check_inputs(&self, inputs: &Mat) -> Result<()> {
        if inputs.nrows() == 0 || inputs.ncols() != self.cfg.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "resampler expects N×{} inputs with N ≥ 1, got {:?}",
                self.cfg.input_dim,
                inputs.dim()
            )));
        }
        Ok(())
    }

    /// `L × d` tokens for `inputs`.
    pub fn resample(&self, inputs: &Mat) -> Result<Mat> {
        self.check_inputs(inputs)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(inputs.clone());
        let out = self.forward(&mut g, &p, x);
        Ok(g.value(out).clone())
    }

    /// Gradients of `sum(resample(inputs) ⊙ upstream)` for every parameter,
    /// in parameter order.
    pub fn gradients(&self, inputs: &Mat, upstream: &Mat) -> Result<Vec<Mat>> {
        self.check_inputs(inputs)?;
        if upstream.dim() != (self.cfg.tokens, self.cfg.width) {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?}",
                upstream.dim()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let x = g.constant(inputs.clone());
        let out = self.forward(&mut g, &p, x);
        let grads = g.backward_with(out, upstream.clone());
        Ok(self.params.gradients(&grads, &p))
    }
}

/// Verifies that `loaded` has the same parameter names and shapes as
/// `expected`.
pub(crate) fn check_layout(expected: &ParamSet, loaded: &ParamSet) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(Error::CheckpointMismatch(format!(
            "expected {} parameters, found {}",
            expected.len(),
            loaded.len()
        )));
    }
    for ((en, ev), (ln, lv)) in expected.iter().zip(loaded.iter()) {
        if en != ln || ev.dim() != lv.dim() {
            return Err(Error::CheckpointMismatch(format!(
                "{en} {:?} vs {ln} {:?}",
                ev.dim(),
                lv.dim()
            )));
        }
    }
    Ok(())
}
