//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place; callers zero them before the next backward pass.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c = &self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = store
                    .ids()
                    .map(|id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= c.learning_rate * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![3.0, -2.0]));
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..500 {
            store.zero_grad();
            let mut g = Graph::new();
            let v = g.param(&store, x);
            let sq = g.square(v);
            let loss = g.sum(sq);
            g.backward_into(loss, &mut store).unwrap();
            opt.step(&mut store);
        }
        assert!(store.value(x).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn decay_shrinks_weights_without_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0]));
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store);
        assert!((store.value(x).data()[0] - 0.95).abs() < 1e-12);
    }
}
