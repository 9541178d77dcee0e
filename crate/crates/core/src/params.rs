//! Named parameter collections, their binding onto a [`Graph`], and content
//! digests used to verify that frozen weights stay frozen.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Mat, Var};

/// Ordered list of named matrices. Order is part of the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut impl Rng,
    ) -> usize {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let value = Mat::from_shape_simple_fn(shape, || dist.sample(rng));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> usize {
        self.add(name, Mat::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: (usize, usize)) -> usize {
        self.add(name, Mat::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Mat {
        &self.values[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Mat {
        &mut self.values[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Puts every parameter on the tape, as trainable leaves when `trainable`
    /// is set and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients aligned with the parameter order; zeros for parameters the
    /// loss does not depend on.
    pub fn gradients(&self, grads: &Gradients, bound: &Bound) -> Vec<Mat> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| grads.get_or_zeros(*var, v.dim()))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update(name.as_bytes());
            h.update((value.nrows() as u64).to_le_bytes());
            h.update((value.ncols() as u64).to_le_bytes());
            for x in value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A [`ParamSet`] placed on a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, slot: usize) -> &Var {
        &self.vars[slot]
    }
}

/// Adds `other` into `acc` slot by slot.
pub fn accumulate(acc: &mut [Mat], other: &[Mat]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

pub fn zeros_like(set: &ParamSet) -> Vec<Mat> {
    set.values.iter().map(|v| Mat::zeros(v.dim())).collect()
}

pub fn hex_digest(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
