//! AdamW: Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |_| Vec::new();
        Self {
            config,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `store`. Each must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            match grads.get(id) {
                None => {
                    return Err(Error::contract(format!(
                        "no gradient for parameter {}",
                        store.name(id)
                    )))
                }
                Some(g) if g.shape() != store.get(id).shape() => {
                    return Err(Error::Shape {
                        op: "adamw",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in ids {
            let g = grads.get(id).expect("checked").data();
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.is_empty() {
                m.resize(p.len(), 0.0);
                v.resize(p.len(), 0.0);
            }
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(p: f64, g: f64, cfg: AdamWConfig) -> (f64, AdamW) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(p));
        let mut grads = GradStore::for_store(&store);
        grads.accumulate(id, &Tensor::scalar(g));
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &grads).unwrap();
        (store.get(id).item(), opt)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (p, opt) = one_param(1.0, 1.0, cfg);
        assert!((p - 1.0 - (-0.1)).abs() < 1e-6);
        assert!((p - 0.9).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(one_param(1.0, 0.0, cfg).0, 1.0);
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.1,
            ..Default::default()
        };
        assert!((one_param(1.0, 0.0, cfg).0 - 0.99).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let empty = GradStore::for_store(&store);
        let r = opt.step(&mut store, &empty);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn step_counter_increments() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::zeros(2, 2));
        let mut grads = GradStore::for_store(&store);
        grads.accumulate(id, &Tensor::full(2, 2, 0.5));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for k in 1..=5 {
            opt.step(&mut store, &grads).unwrap();
            assert_eq!(opt.step_count(), k);
        }
    }
}
