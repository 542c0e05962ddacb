use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

/// Moment buffers of one parameter. `second` is unused by SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
    pub steps: u64,
}

/// Optimizer with per-parameter state keyed by [`ParamId`].
///
/// Adam keeps a per-parameter step count for bias correction: task heads
/// only receive updates on the steps their task is sampled.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub step: u64,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("optimizer.lr", format!("must be positive, got {lr}")));
        }
        Ok(Optimizer {
            config,
            lr,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerConfig::default(), lr)
    }

    pub fn sgd(lr: f64, momentum: f64) -> Result<Self> {
        Self::new(
            OptimizerConfig {
                kind: OptimizerKind::SgdMomentum,
                momentum,
                ..OptimizerConfig::default()
            },
            lr,
        )
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.state.get(&id)
    }

    pub fn state(&self) -> impl Iterator<Item = (ParamId, &Moments<T>)> {
        self.state.iter().map(|(&k, v)| (k, v))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Moments<T>) {
        self.state.insert(id, m);
    }

    /// Updates `params` from their accumulated gradients, then zeroes every
    /// gradient in the store. Fails before touching anything if a listed
    /// parameter has no gradient or a non-finite one.
    pub fn apply(&mut self, store: &mut ParamStore<T>, params: &[ParamId]) -> Result<()> {
        for &id in params {
            let t = store.get(id);
            let g = t.grad.as_ref().ok_or_else(|| Error::MissingGrad(store.name(id).to_string()))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in `{}`", store.name(id))));
            }
        }
        self.step += 1;
        let lr = T::lit(self.lr);
        for &id in params {
            let t = store.get_mut(id);
            let n = t.numel();
            let grad = t.grad.take().expect("checked above");
            let st = self.state.entry(id).or_insert_with(|| Moments {
                first: vec![T::zero(); n],
                second: vec![T::zero(); n],
                steps: 0,
            });
            st.steps += 1;
            let values = t.data_mut();
            match self.config.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::lit(self.config.momentum);
                    for ((p, m), &g) in values.iter_mut().zip(st.first.iter_mut()).zip(&grad) {
                        *m = mu * *m + g;
                        *p -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let b1 = T::lit(self.config.beta1);
                    let b2 = T::lit(self.config.beta2);
                    let eps = T::lit(self.config.eps);
                    let c1 = T::one() - b1.powi(st.steps as i32);
                    let c2 = T::one() - b2.powi(st.steps as i32);
                    for (((p, m), v), &g) in values
                        .iter_mut()
                        .zip(st.first.iter_mut())
                        .zip(st.second.iter_mut())
                        .zip(&grad)
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
