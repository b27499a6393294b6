use crate::error::{Error, Result};

use super::layers::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `params` at step `t` (1-based).
pub fn adam_step(params: &mut [f64], grads: &[f64], slot: &mut AdamSlot, t: u64, hyper: &AdamConfig) {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(&mut slot.m).zip(&mut slot.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

/// Adam over every trainable tensor of a model, in visit order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients. Non-finite gradients abort the
    /// step before any parameter changes.
    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P) -> Result<()> {
        let mut bad = None;
        model.visit_tensors("", &mut |name, t, trainable| {
            if trainable && bad.is_none() {
                if let Some(g) = t.grad() {
                    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                        bad = Some(format!("gradient of {name}[{i}] = {}", g[i]));
                    }
                }
            }
        });
        if let Some(location) = bad {
            return Err(Error::NonFinite { location });
        }
        self.step += 1;
        let t = self.step;
        let hyper = self.config;
        let slots = &mut self.slots;
        let mut idx = 0;
        model.visit_tensors("", &mut |_, tensor, trainable| {
            if !trainable {
                return;
            }
            if slots.len() <= idx {
                slots.push(AdamSlot::zeros(tensor.len()));
            }
            let slot = &mut slots[idx];
            idx += 1;
            let (data, grad) = tensor.data_and_grad_mut();
            adam_step(data, grad, slot, t, &hyper);
        });
        Ok(())
    }
}
