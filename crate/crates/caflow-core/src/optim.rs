//! Decoupled-weight-decay adaptive optimizer and parameter EMA.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

/// Cosine decay to zero: `lr(step) = lr0 * 0.5 * (1 + cos(pi * step / total))`.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.min(self.total_steps) as f64;
        self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s / self.total_steps as f64).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained non-finite values; parameters were left unchanged.
    SkippedNonFinite,
}

/// AdamW over a filtered subset of a [`ParamSet`]. Moment buffers are keyed
/// by parameter name; update order follows the set's insertion order.
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps_applied: usize,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps_applied: 0, moments: HashMap::new() }
    }

    pub fn steps_applied(&self) -> usize {
        self.steps_applied
    }

    /// One update over all trainable params accepted by `filter`. Missing
    /// gradients are treated as zero. If any accepted gradient is non-finite
    /// the whole step is skipped.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
        filter: impl Fn(&str) -> bool,
    ) -> StepOutcome {
        for (name, g) in grads {
            if filter(name) && !g.all_finite() {
                return StepOutcome::SkippedNonFinite;
            }
        }
        self.steps_applied += 1;
        let t = self.steps_applied as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.weight_decay);
        let ibc1 = T::from_f64(1.0 / bc1);
        let ibc2 = T::from_f64(1.0 / bc2);

        for (name, p) in params.iter_mut() {
            if !p.trainable || !filter(name) {
                continue;
            }
            let n = p.tensor.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let data = p.tensor.data_mut();
            match grads.get(name) {
                Some(gt) => {
                    let g = gt.data();
                    for i in 0..n {
                        m[i] = b1 * m[i] + one_m_b1 * g[i];
                        v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                        let mhat = m[i] * ibc1;
                        let vhat = v[i] * ibc2;
                        data[i] = data[i] - lr_t * (mhat / (vhat.sqrt() + eps)) - decay * data[i];
                    }
                }
                None => {
                    // zero gradient: moments decay, weight decay still applies
                    for i in 0..n {
                        m[i] = b1 * m[i];
                        v[i] = b2 * v[i];
                        let mhat = m[i] * ibc1;
                        let vhat = v[i] * ibc2;
                        data[i] = data[i] - lr_t * (mhat / (vhat.sqrt() + eps)) - decay * data[i];
                    }
                }
            }
        }
        StepOutcome::Applied
    }
}

/// `ema <- decay * ema + (1 - decay) * params`, elementwise over all entries.
pub fn ema_update<T: Scalar>(ema: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) {
    let d = T::from_f64(decay);
    let omd = T::from_f64(1.0 - decay);
    for (name, target) in ema.iter_mut() {
        let src = params.tensor(name);
        for (e, &p) in target.tensor.data_mut().iter_mut().zip(src.data()) {
            *e = d * *e + omd * p;
        }
    }
}
