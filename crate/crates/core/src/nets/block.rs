use super::{
    join, leaky_relu, leaky_relu_backward, BatchNorm2d, BnCache, BnMode, Conv2d, ConvCache, Module, Param,
    LEAKY_SLOPE,
};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// `conv -> [batch norm] -> [leaky relu]`, the discriminator building block.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub norm: Option<BatchNorm2d<T>>,
    pub activation: bool,
}

pub struct ConvBlockCache<T> {
    conv: ConvCache<T>,
    norm: Option<BnCache<T>>,
    out: Tensor<T>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(conv: Conv2d<T>, norm: bool, activation: bool) -> Self {
        let norm = norm.then(|| BatchNorm2d::new(conv.out_channels()));
        Self { conv, norm, activation }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, ConvBlockCache<T>)> {
        let (mut h, conv) = self.conv.forward(x)?;
        let norm = match &mut self.norm {
            Some(bn) => {
                let (y, c) = bn.forward(&h, mode)?;
                h = y;
                Some(c)
            }
            None => None,
        };
        if self.activation {
            h = leaky_relu(&h, LEAKY_SLOPE);
        }
        Ok((
            h.clone(),
            ConvBlockCache {
                conv,
                norm,
                out: h,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvBlockCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = if self.activation {
            leaky_relu_backward(&cache.out, dy, LEAKY_SLOPE)
        } else {
            dy.clone()
        };
        if let (Some(bn), Some(c)) = (&mut self.norm, &cache.norm) {
            g = bn.backward(c, &g);
        }
        self.conv.backward(&cache.conv, &g)
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        if let Some(bn) = &self.norm {
            bn.visit_params(&join(prefix, "norm"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.norm {
            bn.visit_params_mut(&join(prefix, "norm"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(bn) = &self.norm {
            bn.visit_buffers(&join(prefix, "norm"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(bn) = &mut self.norm {
            bn.visit_buffers_mut(&join(prefix, "norm"), f);
        }
    }
}
