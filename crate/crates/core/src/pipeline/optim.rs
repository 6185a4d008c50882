//! Learning-rate schedule and the Adam optimizer.

use std::collections::BTreeMap;

use sarfah_tensor::{ParamTree, Tensor};

use crate::error::Result;

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_end;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates one named slice; `bias_t` is the 1-based step used for bias
    /// correction.
    pub fn step_slice(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64, bias_t: u64) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let c1 = 1.0 - self.beta1.powi(bias_t as i32);
        let c2 = 1.0 - self.beta2.powi(bias_t as i32);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Applies one step to every named gradient.
    pub fn step(&mut self, tree: &mut ParamTree, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t;
        for (name, g) in grads {
            let p = tree.get_mut(name)?;
            self.step_slice(name, p.tensor.data_mut(), g.data(), lr, t);
        }
        Ok(())
    }
}

/// Euclidean norm over all gradients.
pub fn grad_norm(grads: &[(String, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
