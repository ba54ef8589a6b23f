use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoclError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{hash_tensors, Tensor};

/// Affine classifier for one task's label space: `logits = pooled · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub task_id: usize,
    /// `[d_model, n_classes]`
    pub weight: Tensor,
    /// `[n_classes]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl Head {
    pub fn init(task_id: usize, d_model: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            task_id,
            weight: Tensor::randn(&[d_model, n_classes], 0.02, rng),
            bias: Tensor::zeros(&[n_classes]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn d_model(&self) -> usize {
        self.weight.rows()
    }

    /// Appends freshly initialized class columns until the head has `n_classes`.
    pub fn grow(&mut self, n_classes: usize, rng: &mut ChaCha8Rng) {
        let old = self.n_classes();
        if n_classes <= old {
            return;
        }
        let d = self.d_model();
        let extra = Tensor::randn(&[d, n_classes - old], 0.02, rng);
        let mut w = Vec::with_capacity(d * n_classes);
        for i in 0..d {
            w.extend_from_slice(&self.weight.data()[i * old..(i + 1) * old]);
            w.extend_from_slice(&extra.data()[i * (n_classes - old)..(i + 1) * (n_classes - old)]);
        }
        self.weight = Tensor::from_parts(vec![d, n_classes], w);
        let mut b = self.bias.to_vec();
        b.resize(n_classes, 0.0);
        self.bias = Tensor::vector(b);
    }

    pub fn classify(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.d_model() {
            return Err(MoclError::Config(format!(
                "pooled width {} does not match head input {}",
                pooled.len(),
                self.d_model()
            )));
        }
        let c = self.n_classes();
        let w = self.weight.data();
        let mut logits = self.bias.to_vec();
        for (i, x) in pooled.iter().enumerate() {
            for (j, l) in logits.iter_mut().enumerate() {
                *l += x * w[i * c + j];
            }
        }
        Ok(logits)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn param_hash(&self) -> String {
        hash_tensors([&self.weight, &self.bias])
    }
}

impl HeadVars {
    /// `[1, n_classes]` logits for a `[1, d_model]` pooled row.
    pub fn logits(&self, tape: &mut Tape, pooled: Var) -> Var {
        let y = tape.matmul(pooled, self.weight);
        tape.add_row(y, self.bias)
    }
}
