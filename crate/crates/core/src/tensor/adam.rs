use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Bias-corrected Adam over a named parameter set.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry are left untouched.
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let c1 = T::lit(1.0 - beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(eps));
        for (name, p) in params.iter_mut() {
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let zero;
            let g = match grads.get(name) {
                Some(g) => g.data(),
                None => {
                    zero = vec![T::zero(); p.numel()];
                    &zero
                }
            };
            let m = st.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = st.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let (m, v) = (st.m.data(), st.v.data());
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mh = mi / c1;
                let vh = vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
