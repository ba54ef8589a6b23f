//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameters.
///
/// Callers must hand parameters to [`AdamW::step`] in the same order on every
/// call; moments are matched by position.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed size");
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let updated: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(j, (&w, &gj))| {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    w - lr * weight_decay * w - lr * mhat / (vhat.sqrt() + eps)
                })
                .collect();
            **p = Tensor::from_parts(p.shape().to_vec(), updated);
        }
    }
}
