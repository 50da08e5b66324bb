//! Adaptive-moment (Adam) optimizer over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::math::{sqrt, to_f32_grid};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: ParamSet,
    second: ParamSet,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&ParamSet, &ParamSet) {
        (&self.first, &self.second)
    }

    /// One bias-corrected update. Results are rounded onto the `f32` grid.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut().iter_mut().zip(self.second.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] = to_f32_grid(p.data[i] - learning_rate * mhat / (sqrt(vhat) + epsilon));
            }
        }
    }
}

/// Adam on a plain vector, without grid rounding (latent codes).
#[derive(Debug, Clone)]
pub(crate) struct VecAdam {
    lr: f64,
    m: alloc::vec::Vec<f64>,
    v: alloc::vec::Vec<f64>,
    t: u64,
}

impl VecAdam {
    pub fn new(lr: f64, n: usize) -> Self {
        VecAdam {
            lr,
            m: alloc::vec![0.0; n],
            v: alloc::vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = AdamConfig::default();
        self.t += 1;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / (sqrt(self.v[i] / c2) + epsilon);
        }
    }
}
