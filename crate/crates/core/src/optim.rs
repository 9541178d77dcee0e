//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            warmup: 100,
            clip_norm: 1.0,
        }
    }
}

/// Optimiser state for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Self::for_groups(cfg, &[params])
    }

    /// State for several parameter sets updated together, with one global
    /// clipping norm across all of them.
    pub fn for_groups(cfg: AdamConfig, groups: &[&ParamSet]) -> Self {
        let zeros = || {
            groups
                .iter()
                .flat_map(|p| p.values().iter().map(|v| Mat::zeros(v.dim())))
                .collect()
        };
        Self {
            cfg,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.first, &self.second)
    }

    pub fn restore(cfg: AdamConfig, first: Vec<Mat>, second: Vec<Mat>, step: u64) -> Self {
        Self {
            cfg,
            first,
            second,
            step,
        }
    }

    /// Applies one update with gradients aligned to `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        self.step_groups(&mut [params], &[grads]);
    }

    /// One update over parameter groups, in the order given to
    /// [`Adam::for_groups`].
    pub fn step_groups(&mut self, params: &mut [&mut ParamSet], grads: &[&[Mat]]) {
        assert_eq!(params.len(), grads.len(), "group count mismatch");
        for (p, g) in params.iter().zip(grads) {
            assert_eq!(g.len(), p.len(), "gradient count mismatch");
        }
        self.step += 1;
        let c = &self.cfg;
        let norm = grads
            .iter()
            .flat_map(|gs| gs.iter())
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let warm = if c.warmup == 0 {
            1.0
        } else {
            ((self.step as f64) / c.warmup as f64).min(1.0)
        };
        let lr = c.learning_rate * warm;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let values = params.iter_mut().flat_map(|p| p.values_mut().iter_mut());
        let flat_grads = grads.iter().flat_map(|gs| gs.iter());
        for ((p, g), (m, v)) in values
            .zip(flat_grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
                    *p -= lr * (update + c.weight_decay * *p);
                });
        }
    }
}
