//! Adam with bias correction and coupled (L2-style) weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub const fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Profile for plain and convolutional autoencoders.
    pub const fn autoencoder() -> Self {
        Self::new(1e-4, 1e-5)
    }

    /// Profile for the fully-connected VAE and CVAE.
    pub const fn variational() -> Self {
        Self::new(1e-3, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::autoencoder()
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(Adam {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let value = std::rc::Rc::make_mut(&mut p.value);
            let (theta, g) = (value.data_mut(), p.grad.data());
            for i in 0..theta.len() {
                let g = g[i] + c.weight_decay * theta[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                theta[i] -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moments as named arrays, for checkpointing alongside the parameters.
    pub fn state_arrays(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        params
            .iter()
            .zip(&self.m)
            .zip(&self.v)
            .flat_map(|((p, m), v)| {
                [
                    (format!("adam.m.{}", p.name), m.clone()),
                    (format!("adam.v.{}", p.name), v.clone()),
                ]
            })
            .collect()
    }

    pub fn restore(
        config: AdamConfig,
        steps: u64,
        params: &ParamStore,
        arrays: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut adam = Adam::new(config, params)?;
        adam.t = steps;
        for (i, p) in params.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
                let name = format!("{prefix}{}", p.name);
                let t = arrays
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Config(format!("optimizer state lacks {name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Config(format!(
                        "optimizer state {name} has shape {:?}, parameter {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(adam)
    }
}
