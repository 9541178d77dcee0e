//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Only nodes reachable from a trainable leaf carry gradients.

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask; `true` means the key column may be attended to.
pub type Mask = Rc<Array2<bool>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Normalize(Var, Vec<f64>),
    Gelu(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanSquaredError(Var, Var),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not influence the loss through any tracked path.
    pub fn get(&self, var: Var) -> Option<&Mat> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` for
    /// untouched variables.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Mat {
        self.get(var).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulT(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, c), tracked)
    }

    /// Adds the `1×d` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), tracked)
    }

    /// Multiplies every row of `a` element-wise by the `1×d` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a single row");
        let value = self.value(a) * self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::MulRow(a, row), tracked)
    }

    /// Row-wise standardisation (layer norm without the affine part).
    pub fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.clone();
        let mut rstds = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * rstd);
            rstds.push(rstd);
        }
        let tracked = self.tracked(a);
        self.push(out, Op::Normalize(a, rstds), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let tracked = self.tracked(a);
        self.push(value, Op::Gelu(a), tracked)
    }

    /// Row-wise softmax. Masked-out entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        let x = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.dim(), x.dim(), "mask shape must match scores");
        }
        let mut out = x.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            let allowed = mask.map(|m| m.row(i));
            let mut max = f64::NEG_INFINITY;
            match &allowed {
                Some(keep) => {
                    for (v, k) in row.iter().zip(keep.iter()) {
                        if *k && *v > max {
                            max = *v;
                        }
                    }
                }
                None => max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
            assert!(max.is_finite(), "softmax row {i} has no admissible entry");
            let mut total = 0.0;
            match &allowed {
                Some(keep) => {
                    for (v, k) in row.iter_mut().zip(keep.iter()) {
                        *v = if *k { (*v - max).exp() } else { 0.0 };
                        total += *v;
                    }
                }
                None => {
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                }
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let tracked = self.tracked(a);
        self.push(out, Op::Softmax(a), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), tracked)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::SliceRows(a, start), tracked)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::SliceCols(a, start), tracked)
    }

    /// Mean of squared element-wise differences, as a `1×1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dim(), y.dim(), "mse operands must share a shape");
        let n = x.len() as f64;
        let total = Zip::from(x)
            .and(y)
            .fold(0.0, |acc, p, q| acc + (p - q) * (p - q));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::MeanSquaredError(a, b),
            tracked,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::Sum(a), tracked)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    /// Back-propagates from `root`, seeding it with `seed` (ones for a scalar
    /// loss via [`Graph::backward`]).
    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.dim(), self.shape(root), "seed shape must match root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = Mat::ones(self.shape(loss));
        self.backward_with(loss, seed)
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.tracked(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.tracked(*a) {
                    acc(*a, g * self.value(*row));
                }
                if self.tracked(*row) {
                    let prod = g * self.value(*a);
                    acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Normalize(a, rstds) => {
                let xhat = &node.value;
                let n = xhat.ncols() as f64;
                let mut dx = Mat::zeros(xhat.dim());
                for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let gi = g.row(i);
                    let xi = xhat.row(i);
                    let sum_g = gi.sum();
                    let sum_gx = gi.dot(&xi);
                    let r = rstds[i];
                    for j in 0..out.len() {
                        out[j] = r / n * (n * gi[j] - sum_g - xi[j] * sum_gx);
                    }
                }
                acc(*a, dx);
            }
            Op::Gelu(a) => {
                let mut dx = self.value(*a).mapv(gelu_derivative);
                dx *= g;
                acc(*a, dx);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut dx = Mat::zeros(p.dim());
                for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let pi = p.row(i);
                    let gi = g.row(i);
                    let inner = pi.dot(&gi);
                    for j in 0..out.len() {
                        out[j] = pi[j] * (gi[j] - inner);
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.tracked(*p) {
                        acc(*p, g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    if self.tracked(*p) {
                        acc(*p, g.slice(s![.., start..start + cols]).to_owned());
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut full = Mat::zeros(self.shape(*a));
                let rows = g.nrows();
                full.slice_mut(s![*start..*start + rows, ..]).assign(g);
                acc(*a, full);
            }
            Op::SliceCols(a, start) => {
                let mut full = Mat::zeros(self.shape(*a));
                let cols = g.ncols();
                full.slice_mut(s![.., *start..*start + cols]).assign(g);
                acc(*a, full);
            }
            Op::MeanSquaredError(a, b) => {
                let diff = self.value(*a) - self.value(*b);
                let n = diff.len() as f64;
                let d = diff * (2.0 * g[[0, 0]] / n);
                if self.tracked(*b) {
                    acc(*b, -&d);
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Mat::from_elem(self.shape(*a), g[[0, 0]])),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
