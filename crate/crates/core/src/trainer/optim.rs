use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moments are stored per tensor in the
/// order of [`Backbone::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &Backbone<T>, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = model.tensors().iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks the moment buffers line up with `model`.
    pub fn check_compatible(&self, model: &Backbone<T>) -> Result<()> {
        let sizes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
        let ok = |buf: &Vec<Vec<T>>| buf.len() == sizes.len() && buf.iter().zip(&sizes).all(|(b, &s)| b.len() == s);
        if ok(&self.m) && ok(&self.v) {
            Ok(())
        } else {
            Err(Error::Format {
                what: "optimizer state",
                detail: "moment buffers do not match the model".into(),
            })
        }
    }

    /// One update with gradients already scaled by the caller.
    pub fn update(&mut self, model: &mut Backbone<T>, grad: &Backbone<T>, lr: f64, weight_decay: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * weight_decay);
        let grads = grad.tensors();
        for (((_, p), (_, g)), (m, v)) in model
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] = p[i] * decay - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradient tensors.
pub fn grad_norm<T: Scalar>(grad: &Backbone<T>) -> f64 {
    grad.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut Backbone<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grad);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, t) in grad.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
