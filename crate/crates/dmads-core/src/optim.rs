//! Adam with bias correction, keyed by parameter name.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

/// Optimizer state: first/second moment buffers per parameter plus the global
/// step counter driving bias correction.
pub struct Adam<T> {
    pub hyper: AdamParams,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(hyper: AdamParams) -> Self {
        Adam {
            hyper,
            moments: IndexMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store. Every parameter must
    /// have a gradient; a missing one is reported by name.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(self.hyper.lr);
        let b1 = T::from_f64(self.hyper.beta1);
        let b2 = T::from_f64(self.hyper.beta2);
        let eps = T::from_f64(self.hyper.eps);
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);

        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let grad = grads.get(&name).ok_or_else(|| Error::MissingGradient {
                name: name.clone(),
            })?;
            let value = store.get(&name)?;
            if grad.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: value.shape().to_string(),
                    rhs: grad.shape().to_string(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); grad.shape().numel()], vec![T::zero(); grad.shape().numel()]));

            let mut updated = Vec::with_capacity(grad.shape().numel());
            for (i, (&g, &p)) in grad.data().iter().zip(value.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                updated.push(p - lr * m_hat / (v_hat.sqrt() + eps));
            }
            let shape = value.shape();
            store.set(&name, Tensor::new(shape, updated)?)?;
        }
        Ok(())
    }
}
