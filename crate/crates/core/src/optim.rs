//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    steps: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    /// Updates every parameter that holds a gradient, then clears the
    /// gradients. Moment buffers are matched to parameters by position, so
    /// the same parameter list must be passed on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed between steps");
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        for (p, (m, v)) in params.iter_mut().zip(&mut self.moments) {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let decay = 1.0 - lr * weight_decay;
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w *= decay;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
            p.zero_grad();
        }
    }
}

/// Cosine decay from `base_lr` at step 0 to zero at the final step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self { base_lr, total_steps }
    }

    pub fn rate(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.base_lr;
        }
        let progress = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}
