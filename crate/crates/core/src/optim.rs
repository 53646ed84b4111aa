//! Adam with decoupled weight decay, and the cosine step-size schedule.

use serde::{Deserialize, Serialize};

use crate::encoder::{Grads, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global ℓ2 gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Grads,
    pub v: Grads,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        AdamW {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update with step size `lr`. Decay is applied only to parameters
    /// flagged for it, as `p <- p * (1 - lr * wd)` before the moment step.
    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) {
        let c = &self.config;
        let clip_scale = match c.grad_clip {
            Some(max) => {
                let total: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if total > max {
                    max / total
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.decay { 1.0 - lr * c.weight_decay } else { 1.0 };
            for i in 0..p.data.len() {
                let gi = g[i] * clip_scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderSpec, ReferenceEncoder};

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!(cosine_lr(99, 100, 1e-4) < 1e-7);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let spec = EncoderSpec {
            input_side: 4,
            num_classes: 2,
            width: 2,
            depth: 1,
            patch_size: 2,
            heads: 1,
            mlp_ratio: 1,
            drop_path_rate: 0.0,
            stem_patch: 0,
            stem_width: 0,
        };
        let mut model = ReferenceEncoder::new(spec, 0).unwrap();
        let before = model.params().clone();
        let grads: Grads = before
            .params
            .iter()
            .map(|p| p.data.iter().map(|_| 0.5).collect())
            .collect();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &before,
        );
        opt.update(model.params_mut(), &grads, 0.01);
        for (a, b) in before.params.iter().zip(&model.params().params) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weight_decay_only_touches_flagged_params() {
        let spec = EncoderSpec {
            input_side: 2,
            num_classes: 2,
            width: 2,
            depth: 1,
            patch_size: 2,
            heads: 1,
            mlp_ratio: 1,
            drop_path_rate: 0.0,
            stem_patch: 0,
            stem_width: 0,
        };
        let mut model = ReferenceEncoder::new(spec, 0).unwrap();
        let before = model.params().clone();
        let zero = before.zeros_like();
        let mut opt = AdamW::new(AdamWConfig::default(), &before);
        opt.update(model.params_mut(), &zero, 0.1);
        for (a, b) in before.params.iter().zip(&model.params().params) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let expected = if a.decay { x * (1.0 - 0.1 * 0.05) } else { *x };
                assert_eq!(*y, expected, "{}", a.name);
            }
        }
    }
}
