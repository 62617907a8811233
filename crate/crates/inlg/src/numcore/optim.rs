//! Adaptive-moment optimizer with decoupled weight decay, plus the linear
//! warmup learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    shape: Vec<usize>,
}

/// Per-parameter first/second moment accumulators plus a step counter.
///
/// Decay is decoupled: `w <- w - lr*wd*w` happens before the moment update
/// term, so a zero-gradient step still shrinks the weights.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    cfg: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(cfg: AdamConfig) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(name, param, grad)` triples. The caller decides
    /// which parameters participate; anything not passed is untouched.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor, &Tensor)], lr: f32) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::contract(format!("negative learning rate {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        for (name, param, grad) in params.iter_mut() {
            if param.shape() != grad.shape() {
                return Err(Error::contract(format!(
                    "optimizer shape mismatch for {name}: param {:?} vs grad {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; param.numel()],
                    v: vec![0.0; param.numel()],
                    shape: param.shape().to_vec(),
                });
            if slot.shape != param.shape() {
                return Err(Error::contract(format!(
                    "optimizer slot shape changed for {name}"
                )));
            }

            let lr = lr as f64;
            let wd = self.cfg.weight_decay;
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            for ((w, g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                let mut wf = *w as f64;
                let gf = *g as f64;
                wf -= lr * wd * wf;
                let mf = b1 * (*m as f64) + (1.0 - b1) * gf;
                let vf = b2 * (*v as f64) + (1.0 - b2) * gf * gf;
                *m = mf as f32;
                *v = vf as f32;
                let mhat = mf / bc1;
                let vhat = vf / bc2;
                wf -= lr * mhat / (vhat.sqrt() + eps);
                *w = wf as f32;
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, constant after.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f32 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.base_lr
        } else {
            (self.base_lr as f64 * step as f64 / self.warmup_steps as f64) as f32
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm as f64 && norm > 0.0 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm as f32
}
