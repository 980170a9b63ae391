use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup to `peak`, then cosine decay to `peak * min_ratio`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self { peak: c.peak_lr, warmup: c.warmup_steps, total: c.steps, min_ratio: c.min_lr_ratio }
    }

    /// Learning rate of the update at zero-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.min_ratio;
        floor + (self.peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter tensor
/// in the canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(c: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` says whether tensor `i` receives weight decay.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], decay: &[bool], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        let wd = (lr * self.weight_decay) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let decay_factor = if decay[i] { 1.0 - wd } else { 1.0 };
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] = p[j] * decay_factor - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients, accumulated in f64.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
