//! Adam over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of the L2 penalty `wd/2 * ||theta||^2`, folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: ParamStore<T>,
    v: ParamStore<T>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(config.learning_rate > 0.0) || config.weight_decay < 0.0 || !(0.0..1.0).contains(&config.beta1)
            || !(0.0..1.0).contains(&config.beta2)
        {
            return Err(Error::Config(format!("invalid optimizer settings {config:?}")));
        }
        Ok(Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let lr = T::lit(c.learning_rate);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, wd) = (T::one(), T::lit(c.eps), T::lit(c.weight_decay));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                let g = g + wd * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
