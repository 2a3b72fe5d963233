use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Module;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sr_stage()
    }
}

impl OptimizerConfig {
    pub fn lr_stage() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sr_stage() -> Self {
        Self {
            beta1: 0.9,
            ..Self::lr_stage()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam epsilon must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with per-parameter first and second moments keyed by parameter path.
/// Frozen parameters are skipped entirely.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: OptimizerConfig,
    pub steps: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.steps += 1;
        let OptimizerConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        model.visit_params_mut("", &mut |name, p| {
            if p.frozen {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let (b1, b2) = (T::lit(beta1), T::lit(beta2));
            let (c1, c2) = (T::one() - b1, T::one() - b2);
            let values = p.value.data_mut();
            for (((w, &g), m), v) in values
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g + T::lit(weight_decay) * *w;
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let mhat = m.as_f64() / bc1;
                let vhat = v.as_f64() / bc2;
                *w -= T::lit(lr * mhat / (vhat.sqrt() + epsilon));
            }
        });
    }

    /// `(path, first moment, second moment)` for every tracked parameter.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    pub fn set_moments(&mut self, name: &str, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        m.check_same_shape(&v)?;
        self.moments.insert(name.to_string(), (m, v));
        Ok(())
    }
}
