use super::{join, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics; optionally fold them into the
    /// running estimates.
    Train { update_stats: bool },
    /// Normalise with the running estimates.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (n, c, h, w) = x.try_dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!("batch norm expects {} channels, got {c}", self.channels())));
        }
        let p = h * w;
        let count = n * p;
        let eps = T::lit(EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
                false,
            ),
            BnMode::Train { update_stats } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * p;
                        s += x.data()[off..off + p].iter().copied().sum::<T>();
                    }
                    let m = s / T::lit(count as f64);
                    let mut v = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * p;
                        v += x.data()[off..off + p].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = v / T::lit(count as f64);
                }
                if update_stats {
                    let mom = T::lit(MOMENTUM);
                    let unbias = if count > 1 {
                        T::lit(count as f64 / (count - 1) as f64)
                    } else {
                        T::one()
                    };
                    for ch in 0..c {
                        let rm = &mut self.running_mean.data_mut()[ch];
                        *rm = (T::one() - mom) * *rm + mom * mean[ch];
                        let rv = &mut self.running_var.data_mut()[ch];
                        *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                    }
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                for i in off..off + p {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + bt;
                }
            }
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = dy.dims4();
        let p = h * w;
        let m = T::lit((n * p) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    sum_dy += dy.data()[i];
                    sum_dy_xhat += dy.data()[i] * cache.xhat.data()[i];
                }
            }
            if !self.gamma.frozen {
                self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
                self.beta.grad.data_mut()[ch] += sum_dy;
            }
            let g = self.gamma.value.data()[ch] * cache.inv_std[ch];
            for b in 0..n {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    dx.data_mut()[i] = if cache.batch_stats {
                        g / m * (m * dy.data()[i] - sum_dy - cache.xhat.data()[i] * sum_dy_xhat)
                    } else {
                        g * dy.data()[i]
                    };
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
