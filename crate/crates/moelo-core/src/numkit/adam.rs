//! Adam optimizer over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed update count, used for bias correction.
    pub step: u64,
    /// First-moment buffers, one per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second-moment buffers, one per parameter tensor.
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// State for a parameter list described by per-tensor lengths, using the
    /// conventional defaults (lr 1e-3, betas 0.9/0.999, epsilon 1e-8).
    pub fn new(tensor_lens: &[usize]) -> Self {
        Self::with_lr(tensor_lens, 1e-3)
    }

    pub fn with_lr(tensor_lens: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update applied in place. `params` and `grads`
    /// must line up with the tensor layout this state was built for.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(format!(
                "adam state tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::State(format!(
                    "adam tensor length mismatch: state {}, param {}, grad {}",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
            for i in 0..m.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
