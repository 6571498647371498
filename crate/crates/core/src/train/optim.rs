//! AdamW with bias-corrected moments and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment estimates for every store entry (buffers keep empty slots) and
/// the number of updates taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamW,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamW) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| {
                    if e.kind.trainable() {
                        Tensor::zeros(e.value.shape())
                    } else {
                        Tensor::zeros(&[0])
                    }
                })
                .collect::<Vec<_>>()
        };
        Self {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients accumulated in the store. Weight decay
    /// applies only to entries whose kind decays (matrices and kernels).
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Optimizer(format!(
                "state tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for ((e, m), v) in store.entries().iter().zip(&self.m).zip(&self.v) {
            if e.kind.trainable() && (m.shape() != e.value.shape() || v.shape() != e.value.shape()) {
                return Err(Error::Optimizer(format!(
                    "moment shape {:?} does not match parameter `{}` {:?}",
                    m.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        let step = self
            .step
            .checked_add(1)
            .ok_or_else(|| Error::Optimizer("step counter overflow".into()))?;
        let h = self.hyper;
        let t = i32::try_from(step).unwrap_or(i32::MAX);
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for ((e, m), v) in store.entries_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !e.kind.trainable() {
                continue;
            }
            let decay = if e.kind.decays() { 1.0 - lr * h.weight_decay } else { 1.0 };
            let p = e.value.data_mut();
            let g = e.grad.data();
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mi = h.beta1 * m.data()[i].as_f64() + (1.0 - h.beta1) * gi;
                let vi = h.beta2 * v.data()[i].as_f64() + (1.0 - h.beta2) * gi * gi;
                m.data_mut()[i] = lit(mi);
                v.data_mut()[i] = lit(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
                p[i] = lit(p[i].as_f64() * decay - lr * update);
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn store(kind: ParamKind, v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", kind, Tensor::full(&[3], v));
        s
    }

    #[test]
    fn zero_grads_without_decay_leave_params_unchanged() {
        let mut s = store(ParamKind::Weight, 0.7);
        let mut opt = OptimizerState::new(&s, AdamW::new(0.0));
        opt.update(&mut s, 1e-2).unwrap();
        assert_eq!(s.entries()[0].value.data(), &[0.7; 3]);
    }

    #[test]
    fn zero_grads_with_decay_shrink_weights_only() {
        let mut s = store(ParamKind::Weight, 2.0);
        s.add("b", ParamKind::Bias, Tensor::full(&[1], 2.0));
        let mut opt = OptimizerState::new(&s, AdamW::new(0.05));
        opt.update(&mut s, 0.1).unwrap();
        assert_eq!(s.entries()[0].value.data(), &[2.0 * (1.0 - 0.1 * 0.05); 3]);
        assert_eq!(s.entries()[1].value.data(), &[2.0]);
    }

    #[test]
    fn single_scalar_step_matches_hand_arithmetic() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Weight, Tensor::scalar(1.5));
        s.entries_mut()[0].grad = Tensor::scalar(0.2);
        let mut opt = OptimizerState::new(&s, AdamW::new(0.01));
        opt.update(&mut s, 1e-3).unwrap();
        // m = 0.02, v = 4e-5; m̂ = 0.2, v̂ = 0.04; update = 0.2 / (0.2 + 1e-8)
        let expect: f64 = 1.5 * (1.0 - 1e-3 * 0.01) - 1e-3 * (0.2 / (0.2 + 1e-8));
        assert!((s.get(id).data()[0] - expect).abs() < 1e-12);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn step_overflow_is_an_error() {
        let mut s = store(ParamKind::Weight, 1.0);
        let mut opt = OptimizerState::new(&s, AdamW::new(0.0));
        opt.step = u64::MAX;
        assert!(matches!(opt.update(&mut s, 1e-3), Err(Error::Optimizer(_))));
    }

    #[test]
    fn mismatched_state_is_an_error() {
        let mut s = store(ParamKind::Weight, 1.0);
        let mut opt = OptimizerState::new(&s, AdamW::new(0.0));
        opt.m[0] = Tensor::zeros(&[4]);
        assert!(opt.update(&mut s, 1e-3).is_err());
    }
}
