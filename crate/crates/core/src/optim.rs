//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shrink weights directly (`w ← w − lr·λ·w`) instead of adding `λ·w`
    /// to the gradient.
    pub decoupled_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled_decay: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment buffers keyed by parameter name, created on first update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

/// One parameter update request.
pub struct Update<'a> {
    pub name: &'a str,
    pub param: &'a mut Tensor,
    pub grad: &'a Tensor,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn state_len(&self) -> usize {
        self.moments.len()
    }

    /// Advances the step counter once and updates every listed parameter.
    /// Parameters that are not listed (frozen ones) are neither updated nor
    /// decayed and never get buffers.
    pub fn step(&mut self, updates: &mut [Update<'_>]) -> Result<()> {
        for u in updates.iter() {
            if u.param.shape() != u.grad.shape() {
                return shape_err("adam gradient", u.param.shape(), u.grad.shape());
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        for u in updates.iter_mut() {
            let n = u.param.len();
            let mo = self.moments.entry(u.name.into()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (((w, &g), m), v) in u
                .param
                .data_mut()
                .iter_mut()
                .zip(u.grad.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                let g = if c.decoupled_decay { g } else { g + c.weight_decay * *w };
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                if c.decoupled_decay {
                    *w -= c.lr * c.weight_decay * *w;
                }
                *w -= c.lr * m_hat / (Float::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}
