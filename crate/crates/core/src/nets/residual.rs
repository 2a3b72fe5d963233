use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, Conv2d, ConvCache, Module, Padding, Param, SineCache, SineLayer};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// conv -> sine -> conv
    Sandwich,
    /// sine -> conv -> sine -> conv
    Preactivation,
}

/// `inner(x) + x` with a sine-activated inner path.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub arrangement: Arrangement,
    /// Sine in front of `conv_a`; present only for the pre-activation layout.
    pub pre_sine: Option<SineLayer<T>>,
    pub conv_a: Conv2d<T>,
    pub sine: SineLayer<T>,
    pub conv_b: Conv2d<T>,
}

pub struct BlockCache<T> {
    pre: Option<SineCache<T>>,
    a: ConvCache<T>,
    s: SineCache<T>,
    b: ConvCache<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        kernel: usize,
        omega0: f64,
        arrangement: Arrangement,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let pad = (kernel - 1) / 2;
        let pre_sine =
            (arrangement == Arrangement::Preactivation).then(|| SineLayer::new(channels, channels, omega0, rng));
        let conv_a = Conv2d::new(channels, channels, kernel, 1, pad, padding, true, rng);
        let sine = SineLayer::new(channels, channels, omega0, rng);
        let conv_b = Conv2d::new(channels, channels, kernel, 1, pad, padding, true, rng);
        Self {
            arrangement,
            pre_sine,
            conv_a,
            sine,
            conv_b,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_a.in_channels()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = x.try_dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "residual block expects {} channels, got {c}",
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        self.check(x)?;
        let (h, pre) = match &self.pre_sine {
            Some(s) => {
                let (h, c) = s.forward(x)?;
                (h, Some(c))
            }
            None => (x.clone(), None),
        };
        let (h, a) = self.conv_a.forward(&h)?;
        let (h, s) = self.sine.forward(&h)?;
        let (mut h, b) = self.conv_b.forward(&h)?;
        h.add_assign(x);
        Ok((h, BlockCache { pre, a, s, b }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let h = match &self.pre_sine {
            Some(s) => s.infer(x)?,
            None => x.clone(),
        };
        let h = self.conv_a.infer(&h)?;
        let h = self.sine.infer(&h)?;
        let mut h = self.conv_b.infer(&h)?;
        h.add_assign(x);
        Ok(h)
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.conv_b.backward(&cache.b, dy);
        let g = self.sine.backward(&cache.s, &g);
        let mut g = self.conv_a.backward(&cache.a, &g);
        if let (Some(s), Some(c)) = (&mut self.pre_sine, &cache.pre) {
            g = s.backward(c, &g);
        }
        g.add_assign(dy);
        g
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(s) = &self.pre_sine {
            s.visit_params(&join(prefix, "pre_sine"), f);
        }
        self.conv_a.visit_params(&join(prefix, "conv_a"), f);
        self.sine.visit_params(&join(prefix, "sine"), f);
        self.conv_b.visit_params(&join(prefix, "conv_b"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(s) = &mut self.pre_sine {
            s.visit_params_mut(&join(prefix, "pre_sine"), f);
        }
        self.conv_a.visit_params_mut(&join(prefix, "conv_a"), f);
        self.sine.visit_params_mut(&join(prefix, "sine"), f);
        self.conv_b.visit_params_mut(&join(prefix, "conv_b"), f);
    }
}
