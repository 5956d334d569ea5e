//! Named parameters and decoupled-weight-decay Adam.

use std::collections::HashMap;

use crate::tensor::{Tensor, TensorError};

/// A named trainable (or frozen) tensor. The freeze bit is what stage plans
/// toggle; a frozen parameter must come out of training bit-identical.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name so the same optimizer instance survives freeze-set changes.
pub struct AdamW {
    pub config: AdamWConfig,
    state: HashMap<String, Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: HashMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the trainable subset. `lr` is the schedule-resolved
    /// rate for this step. Frozen parameters are not read or written.
    pub fn step(&mut self, params: &[Parameter], lr: f32) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params {
            if !p.trainable {
                continue;
            }
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| TensorError::NonScalarLoss(vec![0]))?;
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let (m, v) = (&mut st.m, &mut st.v);
            p.tensor.update_data(|w| {
                for i in 0..w.len() {
                    let g = grad[i];
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    w[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
                }
            });
        }
        Ok(())
    }
}

/// Zero every gradient buffer and re-arm backward across the set.
pub fn zero_grads(params: &[Parameter]) {
    for p in params {
        p.tensor.zero_grad();
    }
}

/// Cosine decay to zero with linear warmup over the first `warmup` steps.
/// `step` is 0-based; the first optimizer step sees `step = 0`.
pub fn lr_at(base_lr: f32, step: usize, total_steps: usize, warmup: usize) -> f32 {
    if total_steps == 0 {
        return base_lr;
    }
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f32 / warmup as f32;
    }
    let denom = (total_steps.saturating_sub(warmup)).max(1) as f32;
    let progress = ((step - warmup) as f32 / denom).min(1.0);
    0.5 * base_lr * (1.0 + (std::f32::consts::PI * progress).cos())
}
