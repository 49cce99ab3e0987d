//! Bias-corrected Adam with optional decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{NdError, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<T>, Vec<T>)> {
        &self.moments
    }

    /// Restores serialized state.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Vec<T>, Vec<T>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// Non-finite gradients abort the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(NdError::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(NdError::Incompatible {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(NdError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                let gf = gi.f64();
                let mf = b1 * mi.f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.f64() + (1.0 - b2) * gf * gf;
                *mi = T::lit(mf);
                *vi = T::lit(vf);
                let mut pf = pi.f64();
                if wd > 0.0 {
                    pf -= lr * wd * pf;
                }
                pf -= lr * (mf / bc1) / ((vf / bc2).sqrt() + eps);
                *pi = T::lit(pf);
            }
        }
        Ok(())
    }
}
