//! Layer building blocks shared by the resamplers, the motion context
//! transformer and the denoiser. Each block records the slots of its weights
//! inside a [`ParamSet`] and evaluates on a bound copy of that set.

use rand::Rng;

use crate::autograd::{Graph, Mask, Mat, Var};
use crate::params::{Bound, ParamSet};

/// Standard deviation for learned embeddings (queries, null blocks) and
/// [`Init::Small`] weights.
pub const INIT_STD: f64 = 0.02;

/// Weight initialization for dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Fixed standard deviation [`INIT_STD`].
    Small,
    /// Standard deviation `1/√fan_in`.
    FanIn,
}

impl Init {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Small => INIT_STD,
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = set.normal(
            format!("{name}.weight"),
            (input, output),
            init.std(input),
            rng,
        );
        let bias = bias.then(|| set.zeros(format!("{name}.bias"), (1, output)));
        Self { weight, bias }
    }

    pub fn zeroed(set: &mut ParamSet, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = set.zeros(format!("{name}.weight"), (input, output));
        let bias = bias.then(|| set.zeros(format!("{name}.bias"), (1, output)));
        Self { weight, bias }
    }

    pub fn input_dim(&self, set: &ParamSet) -> usize {
        set.get(self.weight).nrows()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.weight]);
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(set: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = set.ones(format!("{name}.gain"), (1, width));
        let bias = set.zeros(format!("{name}.bias"), (1, width));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.normalize(x);
        let scaled = g.mul_row(n, p[self.gain]);
        g.add_row(scaled, p[self.bias])
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
        zero_output: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && inner.is_multiple_of(heads),
            "inner width {inner} not divisible by {heads} heads"
        );
        let query = Linear::new(
            set,
            &format!("{name}.q"),
            query_dim,
            inner,
            false,
            init,
            rng,
        );
        let key = Linear::new(set, &format!("{name}.k"), kv_dim, inner, false, init, rng);
        let value = Linear::new(set, &format!("{name}.v"), kv_dim, inner, false, init, rng);
        let output = if zero_output {
            Linear::zeroed(set, &format!("{name}.o"), inner, out_dim, false)
        } else {
            Linear::new(set, &format!("{name}.o"), inner, out_dim, false, init, rng)
        };
        Self {
            query,
            key,
            value,
            output,
            heads,
            inner,
        }
    }

    /// Attention without the output projection: `concat_h softmax(QKᵀ/√d_h) V`.
    pub fn mix(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        keys: Var,
        mask: Option<&Mask>,
    ) -> Var {
        let q = self.query.forward(g, p, queries);
        let k = self.key.forward(g, p, keys);
        let v = self.value.forward(g, p, keys);
        let head_dim = self.inner / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, mask);
            outs.push(g.matmul(probs, vh));
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        keys: Var,
        mask: Option<&Mask>,
    ) -> Var {
        let mixed = self.mix(g, p, queries, keys, mask);
        self.output.forward(g, p, mixed)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        width: usize,
        hidden: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(set, &format!("{name}.up"), width, hidden, true, init, rng),
            down: Linear::new(set, &format!("{name}.down"), hidden, width, true, init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.up.forward(g, p, x);
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Sinusoidal encoding of a scalar position into `dim` channels
/// (interleaved sin/cos pairs with geometric frequencies).
pub fn sinusoid(position: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    for (i, slot) in out.iter_mut().enumerate() {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        *slot = if i % 2 == 0 {
            (position * freq).sin()
        } else {
            (position * freq).cos()
        };
    }
}

/// `n × dim` table of 1-D sinusoidal positions 0..n.
pub fn sinusoid_table(n: usize, dim: usize) -> Mat {
    let mut table = Mat::zeros((n, dim));
    for (pos, mut row) in table.rows_mut().into_iter().enumerate() {
        sinusoid(
            pos as f64,
            dim,
            row.as_slice_mut().expect("standard layout"),
        );
    }
    table
}

/// Position table for a grid of coordinates: the channels are split evenly
/// between the axes, each axis encoded with [`sinusoid`].
pub fn grid_sinusoid_table(axes: &[usize], dim: usize) -> Mat {
    let n: usize = axes.iter().product();
    let k = axes.len();
    let base = dim / k / 2 * 2;
    let mut widths = vec![base; k];
    widths[0] += dim - base * k;
    let mut table = Mat::zeros((n, dim));
    for (flat, mut row) in table.rows_mut().into_iter().enumerate() {
        let mut rem = flat;
        let mut coords = vec![0usize; k];
        for a in (0..k).rev() {
            coords[a] = rem % axes[a];
            rem /= axes[a];
        }
        let row = row.as_slice_mut().expect("standard layout");
        let mut offset = 0;
        for a in 0..k {
            sinusoid(
                coords[a] as f64,
                widths[a],
                &mut row[offset..offset + widths[a]],
            );
            offset += widths[a];
        }
    }
    table
}
