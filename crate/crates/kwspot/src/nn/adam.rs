//! Adam with bias correction and a linear learning-rate schedule.

use ndarray::{Array1, ArrayD};
use serde::{Deserialize, Serialize};

use super::{CnnModel, Gradients, LayerParams};
use crate::scalar::Real;

/// Linear interpolation from `lr_start` to `lr_end` over `total_steps`
/// optimizer steps, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate before step `t` (zero-based): `lr(0) = lr_start`,
    /// `lr(total_steps) = lr_end` exactly.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.total_steps == 0 || t >= self.total_steps {
            return self.lr_end;
        }
        let frac = t as f64 / self.total_steps as f64;
        self.lr_start + (self.lr_end - self.lr_start) * frac
    }
}

/// Optimizer state: step count and first/second moment tensors shaped like
/// the model parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
    pub(crate) m: Vec<Option<LayerParams<T>>>,
    pub(crate) v: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &CnnModel<T>, schedule: LrSchedule) -> Self {
        let zeros = || -> Vec<Option<LayerParams<T>>> {
            model
                .params()
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: ArrayD::zeros(p.weights.raw_dim()),
                        bias: Array1::from_elem(p.bias.len(), T::zero()),
                    })
                })
                .collect()
        };
        Self {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.t)
    }

    /// Apply one bias-corrected Adam update to every parameter tensor.
    pub fn step(&mut self, model: &mut CnnModel<T>, grads: &Gradients<T>) {
        let lr = T::from_f64_c(self.schedule.lr_at(self.t));
        self.t += 1;
        let b1 = T::from_f64_c(self.beta1);
        let b2 = T::from_f64_c(self.beta2);
        let eps = T::from_f64_c(self.epsilon);
        let c1 = T::from_f64_c(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64_c(1.0 - self.beta2.powi(self.t as i32));
        let one = T::one();

        for ((param, grad), (m, v)) in model
            .params_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (Some(param), Some(grad), Some(m), Some(v)) =
                (param.as_mut(), grad.as_ref(), m.as_mut(), v.as_mut())
            else {
                continue;
            };
            let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            };
            for ((p, &g), (m, v)) in param
                .weights
                .iter_mut()
                .zip(grad.weights.iter())
                .zip(m.weights.iter_mut().zip(v.weights.iter_mut()))
            {
                update(p, g, m, v);
            }
            for ((p, &g), (m, v)) in param
                .bias
                .iter_mut()
                .zip(grad.bias.iter())
                .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
            {
                update(p, g, m, v);
            }
        }
        model.bump_revision();
    }
}
