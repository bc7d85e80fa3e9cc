use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Float;
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers, one per parameter of the store they were created for.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub step: u64,
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// Adam with bias correction.
pub struct Adam;

impl Adam {
    pub fn init<T: Float>(store: &ParamStore<T>, config: AdamConfig) -> OptimizerState<T> {
        let zeros = |id| vec![T::zero(); store.tensor(id).len()];
        OptimizerState {
            step: 0,
            config,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// One update of every trainable parameter. Frozen parameters are left
    /// untouched; a trainable parameter without a gradient buffer is an error.
    pub fn step<T: Float>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
        if state.m.len() != store.len() {
            return Err(contract_err!(
                "optimizer state tracks {} parameters, store has {}",
                state.m.len(),
                store.len()
            ));
        }
        let missing: Vec<&str> = store
            .ids()
            .filter(|&id| !store.is_frozen(id) && store.tensor(id).grad().is_none())
            .map(|id| store.name(id))
            .collect();
        if let Some(first) = missing.first() {
            return Err(contract_err!(
                "adam step without gradients for {} parameter(s), first `{first}`",
                missing.len()
            ));
        }
        state.step += 1;
        let c = state.config;
        let t = state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
            let tensor = store.tensor_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            for (((p, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                *p -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
