use serde::{Deserialize, Serialize};

use super::graph::ParamStore;
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        AdamState { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One bias-corrected Adam update of every trainable parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let bc1 = one - T::of(c.beta1.powi(self.t as i32));
        let bc2 = one - T::of(c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (id, g) in grads.iter().enumerate() {
            if !params.entry(id).trainable {
                continue;
            }
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
