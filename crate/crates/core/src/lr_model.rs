//! Degradation-learning stage networks: the sine-residual generator that maps
//! a bicubically downscaled patch to a realistic low-resolution patch, and the
//! patch discriminator that scores low-resolution images.
//!
//! Both work on the `[0, 1]` intensity scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{
    join, sigmoid, sigmoid_backward, Arrangement, BlockCache, BnMode, Conv2d, ConvBlock, ConvBlockCache, ConvCache,
    Module, Padding, Param, ResidualBlock,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrGeneratorConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub omega0: f64,
    pub padding: Padding,
}

impl Default for LrGeneratorConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            channels: 64,
            kernel_size: 3,
            omega0: 30.0,
            padding: Padding::Zero,
        }
    }
}

impl LrGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("lr generator needs at least one block".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("lr generator channels must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("lr generator kernel must be odd, got {}", self.kernel_size)));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::Config(format!("omega0 must be positive, got {}", self.omega0)));
        }
        Ok(())
    }
}

/// `sigmoid(tail(blocks(head(x))))`, resolution preserving.
#[derive(Clone, Debug)]
pub struct LrGenerator<T> {
    pub config: LrGeneratorConfig,
    pub head: Conv2d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub tail: Conv2d<T>,
}

pub struct LrGeneratorCache<T> {
    head: ConvCache<T>,
    blocks: Vec<BlockCache<T>>,
    tail: ConvCache<T>,
    out: Tensor<T>,
}

impl<T: Real> LrGenerator<T> {
    pub fn new<R: Rng + ?Sized>(config: LrGeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel_size);
        let pad = (k - 1) / 2;
        let head = Conv2d::new(3, c, k, 1, pad, config.padding, true, rng);
        let blocks = (0..config.num_blocks)
            .map(|_| ResidualBlock::new(c, k, config.omega0, Arrangement::Sandwich, config.padding, rng))
            .collect();
        let tail = Conv2d::new(c, 3, k, 1, pad, config.padding, true, rng);
        Ok(Self {
            config,
            head,
            blocks,
            tail,
        })
    }

    fn check(x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.try_dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("lr generator expects 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("lr generator input has an empty spatial extent"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LrGeneratorCache<T>)> {
        Self::check(x)?;
        let (mut h, head) = self.head.forward(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h)?;
            h = y;
            blocks.push(c);
        }
        let (logits, tail) = self.tail.forward(&h)?;
        let out = sigmoid(&logits);
        Ok((
            out.clone(),
            LrGeneratorCache {
                head,
                blocks,
                tail,
                out,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check(x)?;
        let mut h = self.head.infer(x)?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        Ok(sigmoid(&self.tail.infer(&h)?))
    }

    pub fn backward(&mut self, cache: &LrGeneratorCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let g = sigmoid_backward(&cache.out, dy);
        let mut g = self.tail.backward(&cache.tail, &g);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g);
        }
        self.head.backward(&cache.head, &g)
    }
}

impl<T: Real> Module<T> for LrGenerator<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.head.visit_params(&join(prefix, "head"), f);
        self.blocks.visit_params(&join(prefix, "blocks"), f);
        self.tail.visit_params(&join(prefix, "tail"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.head.visit_params_mut(&join(prefix, "head"), f);
        self.blocks.visit_params_mut(&join(prefix, "blocks"), f);
        self.tail.visit_params_mut(&join(prefix, "tail"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDiscriminatorConfig {
    /// Output channels of the normalised conv stages.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for LrDiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256],
            kernel_size: 5,
        }
    }
}

impl LrDiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("invalid lr discriminator channels {:?}", self.channels)));
        }
        if self.kernel_size == 0 {
            return Err(Error::Config("lr discriminator kernel must be positive".into()));
        }
        Ok(())
    }

    /// Side of the square patch each score sees.
    pub fn receptive_field(&self) -> usize {
        self.channels.len() * (self.kernel_size - 1) + 1
    }
}

/// Unpadded stride-1 conv stages with batch norm and leaky relu, then a 1x1
/// linear head. Each output location scores one receptive-field patch.
#[derive(Clone, Debug)]
pub struct LrDiscriminator<T> {
    pub config: LrDiscriminatorConfig,
    pub stages: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
}

pub struct LrDiscriminatorCache<T> {
    stages: Vec<ConvBlockCache<T>>,
    head: ConvCache<T>,
}

impl<T: Real> LrDiscriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: LrDiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for &out in &config.channels {
            let conv = Conv2d::new(in_ch, out, config.kernel_size, 1, 0, Padding::Zero, true, rng);
            stages.push(ConvBlock::new(conv, true, true));
            in_ch = out;
        }
        let head = Conv2d::new(in_ch, 1, 1, 1, 0, Padding::Zero, true, rng);
        Ok(Self { config, stages, head })
    }

    /// Spatial extent of the score map for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let rf = self.config.receptive_field();
        if h < rf || w < rf {
            return Err(Error::shape(format!(
                "lr discriminator needs at least {rf}x{rf} input, got {h}x{w}"
            )));
        }
        Ok((h - rf + 1, w - rf + 1))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, LrDiscriminatorCache<T>)> {
        let (_, c, h, w) = x.try_dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("lr discriminator expects 3 channels, got {c}")));
        }
        self.output_size(h, w)?;
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut hcur = x.clone();
        for s in &mut self.stages {
            let (y, c) = s.forward(&hcur, mode)?;
            hcur = y;
            caches.push(c);
        }
        let (scores, head) = self.head.forward(&hcur)?;
        Ok((scores, LrDiscriminatorCache { stages: caches, head }))
    }

    pub fn backward(&mut self, cache: &LrDiscriminatorCache<T>, dscores: &Tensor<T>) -> Tensor<T> {
        let mut g = self.head.backward(&cache.head, dscores);
        for (s, c) in self.stages.iter_mut().zip(&cache.stages).rev() {
            g = s.backward(c, &g);
        }
        g
    }
}

impl<T: Real> Module<T> for LrDiscriminator<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stages.visit_params(&join(prefix, "stages"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stages.visit_params_mut(&join(prefix, "stages"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stages.visit_buffers(&join(prefix, "stages"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stages.visit_buffers_mut(&join(prefix, "stages"), f);
    }
}
