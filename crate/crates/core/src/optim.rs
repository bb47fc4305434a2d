//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for one array.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    /// Completed updates.
    pub t: u64,
    pub state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once per optimizer step before
    /// [`update`](Self::update).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`. Decay applies to matrices only.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("AdamW::update", param.shape(), grad.shape()));
        }
        if self.t == 0 {
            return Err(Error::invalid("AdamW::update", "begin_step was not called"));
        }
        let c = self.cfg;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let wd = if param.ndim() >= 2 { T::of(c.weight_decay) } else { T::zero() };
        let one = T::one();
        let m = st.m.data_mut();
        let v = st.v.data_mut();
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *p = *p - lr * (mh / (vh.sqrt() + eps) + wd * *p);
        }
        Ok(())
    }
}
