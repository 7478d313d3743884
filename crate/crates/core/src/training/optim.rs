//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WlacError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    /// Upper bound on source plus target tokens per batch (at least one
    /// example is always taken).
    pub batch_tokens: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Steps between metric records.
    pub eval_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of target tokens hidden in CMBLM pretraining.
    pub mask_ratio: f64,
    /// Candidate budget for reranked validation accuracy.
    pub eval_k: usize,
    /// Baseline-based negatives come from the words matching the typed
    /// prefix, the pool the reranker chooses from at inference. When false
    /// they range over the whole vocabulary.
    pub prefix_negatives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            warmup_steps: 200,
            batch_tokens: 2048,
            max_steps: 5000,
            seed: 1,
            eval_interval: 250,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            mask_ratio: 0.15,
            eval_k: 8,
            prefix_negatives: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr > 0.0
            && self.warmup_steps > 0
            && self.batch_tokens > 0
            && self.eval_interval > 0
            && self.epsilon > 0.0
            && self.eval_k > 0;
        let moments = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        let ratio = self.mask_ratio > 0.0 && self.mask_ratio <= 1.0;
        if positive && moments && ratio {
            Ok(())
        } else {
            Err(WlacError::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }

    /// Learning rate for 1-based `step`: linear warmup to `lr`, then decay
    /// with the inverse square root of the step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps as f64;
        self.lr * (step / warmup).min((warmup / step).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(num_params: usize, config: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.epsilon * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}
