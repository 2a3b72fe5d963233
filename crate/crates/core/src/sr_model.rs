//! Super-resolution stage networks.
//!
//! The generator upsamples bicubically, estimates a residual with a stack of
//! pre-activation sine blocks, shrinks that residual onto an l2 ball whose
//! radius follows the estimated noise level, subtracts it and clips to the
//! 8-bit range. The discriminator returns one unbounded score per image.
//!
//! The convolutional trunk works on unit-scaled intensities: the encoder sees
//! the upsampled image divided by 255 and the decoder output is multiplied by
//! 255 before projection, so sine pre-activations stay in their initialised
//! range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::ResampleKernel;
use crate::error::{Error, Result};
use crate::nets::{
    global_avg_pool, global_avg_pool_backward, join, Arrangement, BlockCache, BnMode, Conv2d, ConvBlock,
    ConvBlockCache, ConvCache, Module, Padding, Param, ResidualBlock, Resize, ResizeCache,
};
use crate::tensor::{Real, Tensor};

pub const PIXEL_MAX: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrGeneratorConfig {
    pub scale: usize,
    pub channels: usize,
    pub enc_dec_kernel: usize,
    pub num_resblocks: usize,
    pub res_kernel: usize,
    pub omega0: f64,
    pub padding: Padding,
    /// Number of projection scales: 1 (one ball per image) or the image
    /// channel count (one ball per channel).
    pub alpha_groups: usize,
}

impl Default for SrGeneratorConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            channels: 64,
            enc_dec_kernel: 5,
            num_resblocks: 5,
            res_kernel: 3,
            omega0: 30.0,
            padding: Padding::Reflect,
            alpha_groups: 1,
        }
    }
}

impl SrGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("sr scale must be at least 1".into()));
        }
        if self.channels == 0 || self.num_resblocks == 0 {
            return Err(Error::Config("sr generator needs positive width and depth".into()));
        }
        if self.enc_dec_kernel % 2 == 0 || self.res_kernel % 2 == 0 {
            return Err(Error::Config("sr generator kernels must be odd".into()));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::Config(format!("omega0 must be positive, got {}", self.omega0)));
        }
        if self.alpha_groups != 1 && self.alpha_groups != 3 {
            return Err(Error::Config(format!(
                "alpha_groups must be 1 or 3, got {}",
                self.alpha_groups
            )));
        }
        Ok(())
    }
}

/// Initial projection scales: geometric from 2 down to 1, or just 2 when
/// there is a single scale.
pub fn alpha_init(k: usize) -> Vec<f64> {
    const HI: f64 = 2.0;
    const LO: f64 = 1.0;
    if k <= 1 {
        return vec![HI; k];
    }
    (0..k)
        .map(|i| HI * (LO / HI).powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Trainable l2-ball projection `r * min(1, rho / ||r||)` with
/// `rho = max(alpha, 0) * sigma * sqrt(N)`.
#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub alpha: Param<T>,
}

pub struct ProjectionCache<T> {
    r: Tensor<T>,
    sigma: Vec<f64>,
    groups: usize,
    /// Per (image, group): norm, radius, whether the ball was active.
    state: Vec<(f64, f64, bool)>,
}

impl<T: Real> Projection<T> {
    pub fn new(groups: usize) -> Self {
        let init = alpha_init(groups).into_iter().map(T::lit).collect();
        Self {
            alpha: Param::new(Tensor::from_vec(&[groups], init).expect("alpha length")),
        }
    }

    pub fn groups(&self) -> usize {
        self.alpha.value.numel()
    }

    fn group_len(&self, c: usize, h: usize, w: usize) -> Result<usize> {
        let k = self.groups();
        if k == 1 {
            Ok(c * h * w)
        } else if k == c {
            Ok(h * w)
        } else {
            Err(Error::shape(format!("{k} projection scales for {c} channels")))
        }
    }

    pub fn forward(&self, r: &Tensor<T>, sigma: &[f64]) -> Result<(Tensor<T>, ProjectionCache<T>)> {
        let (n, c, h, w) = r.try_dims4()?;
        let sigma = broadcast_sigma(sigma, n)?;
        let len = self.group_len(c, h, w)?;
        let k = self.groups();
        let mut out = r.clone();
        let mut state = Vec::with_capacity(n * k);
        for (b, &s) in sigma.iter().enumerate() {
            for g in 0..k {
                let start = b * c * h * w + g * len;
                let seg = &mut out.data_mut()[start..start + len];
                let norm = seg.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                let alpha = self.alpha.value.data()[g].as_f64().max(0.0);
                let radius = alpha * s * (len as f64).sqrt();
                let active = norm > radius;
                if active {
                    let f = T::lit(radius / norm);
                    seg.iter_mut().for_each(|v| *v *= f);
                }
                state.push((norm, radius, active));
            }
        }
        Ok((
            out,
            ProjectionCache {
                r: r.clone(),
                sigma,
                groups: k,
                state,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ProjectionCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = cache.r.dims4();
        let k = cache.groups;
        let len = if k == 1 { c * h * w } else { h * w };
        let mut dr = dy.clone();
        for b in 0..n {
            for g in 0..k {
                let (norm, radius, active) = cache.state[b * k + g];
                if !active {
                    continue;
                }
                let start = b * c * h * w + g * len;
                let r = &cache.r.data()[start..start + len];
                let gy = &dy.data()[start..start + len];
                let rg: f64 = r.iter().zip(gy).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                let scale = radius / norm;
                let coef = rg / (norm * norm);
                for (d, (&rv, &gv)) in dr.data_mut()[start..start + len].iter_mut().zip(r.iter().zip(gy)) {
                    *d = T::lit(scale * (gv.as_f64() - rv.as_f64() * coef));
                }
                let alpha = self.alpha.value.data()[g].as_f64();
                if !self.alpha.frozen && alpha > 0.0 {
                    let da = rg / norm * cache.sigma[b] * (len as f64).sqrt();
                    self.alpha.grad.data_mut()[g] += T::lit(da);
                }
            }
        }
        dr
    }
}

impl<T: Real> Module<T> for Projection<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "alpha"), &self.alpha);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "alpha"), &mut self.alpha);
    }
}

fn broadcast_sigma(sigma: &[f64], n: usize) -> Result<Vec<f64>> {
    if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::invalid(format!("noise level must be finite and >= 0, got {bad}")));
    }
    match sigma.len() {
        1 => Ok(vec![sigma[0]; n]),
        m if m == n => Ok(sigma.to_vec()),
        m => Err(Error::invalid(format!("{m} noise levels for a batch of {n}"))),
    }
}

/// Clamp to `[0, 255]`.
pub fn clip_output<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let hi = T::lit(PIXEL_MAX);
    img.map(|v| v.max(T::zero()).min(hi))
}

/// Passes the gradient where the pre-clip value was inside the range.
pub fn clip_backward<T: Real>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let hi = T::lit(PIXEL_MAX);
    let mut g = dy.clone();
    for (d, &v) in g.data_mut().iter_mut().zip(pre.data()) {
        if v < T::zero() || v > hi {
            *d = T::zero();
        }
    }
    g
}

#[derive(Clone, Debug)]
pub struct SrGenerator<T> {
    pub config: SrGeneratorConfig,
    pub encoder: Conv2d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub decoder: Conv2d<T>,
    pub projection: Projection<T>,
}

pub struct SrGeneratorCache<T> {
    resize: Resize<T>,
    resize_cache: ResizeCache,
    encoder: ConvCache<T>,
    blocks: Vec<BlockCache<T>>,
    decoder: ConvCache<T>,
    projection: ProjectionCache<T>,
    pre_clip: Tensor<T>,
}

impl<T: Real> SrGenerator<T> {
    pub fn new<R: Rng + ?Sized>(config: SrGeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, ke, kr) = (config.channels, config.enc_dec_kernel, config.res_kernel);
        let encoder = Conv2d::new(3, c, ke, 1, (ke - 1) / 2, config.padding, true, rng);
        let blocks = (0..config.num_resblocks)
            .map(|_| ResidualBlock::new(c, kr, config.omega0, Arrangement::Preactivation, config.padding, rng))
            .collect();
        let decoder = Conv2d::new(c, 3, ke, 1, (ke - 1) / 2, config.padding, true, rng);
        let projection = Projection::new(config.alpha_groups);
        Ok(Self {
            config,
            encoder,
            blocks,
            decoder,
            projection,
        })
    }

    fn upsampler(&self, x: &Tensor<T>) -> Result<Resize<T>> {
        let (_, c, h, w) = x.try_dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("sr generator expects 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("sr generator input has an empty spatial extent"));
        }
        let s = self.config.scale;
        Resize::new(h, w, s * h, s * w, ResampleKernel::Bicubic, true)
    }

    /// Bicubic upsampling by the model scale.
    pub fn upsample(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.upsampler(x)?.forward(x)?.0)
    }

    /// `sigma` holds one noise level per batch item, or a single shared one.
    pub fn forward(&self, x: &Tensor<T>, sigma: &[f64]) -> Result<(Tensor<T>, SrGeneratorCache<T>)> {
        let resize = self.upsampler(x)?;
        broadcast_sigma(sigma, x.shape()[0])?;
        let (up, resize_cache) = resize.forward(x)?;
        let (mut h, encoder) = self.encoder.forward(&up.scale(T::lit(1.0 / PIXEL_MAX)))?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h)?;
            h = y;
            blocks.push(c);
        }
        let (r, decoder) = self.decoder.forward(&h)?;
        let (p, projection) = self.projection.forward(&r.scale(T::lit(PIXEL_MAX)), sigma)?;
        let pre_clip = up.sub(&p)?;
        let out = clip_output(&pre_clip);
        Ok((
            out,
            SrGeneratorCache {
                resize,
                resize_cache,
                encoder,
                blocks,
                decoder,
                projection,
                pre_clip,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>, sigma: &[f64]) -> Result<Tensor<T>> {
        let up = self.upsample(x)?;
        let mut h = self.encoder.infer(&up.scale(T::lit(1.0 / PIXEL_MAX)))?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let r = self.decoder.infer(&h)?.scale(T::lit(PIXEL_MAX));
        let (p, _) = self.projection.forward(&r, sigma)?;
        Ok(clip_output(&up.sub(&p)?))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &SrGeneratorCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dz = clip_backward(&cache.pre_clip, dy);
        let dp = dz.scale(-T::one());
        let dr = self.projection.backward(&cache.projection, &dp).scale(T::lit(PIXEL_MAX));
        let mut g = self.decoder.backward(&cache.decoder, &dr);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g);
        }
        let mut dup = self.encoder.backward(&cache.encoder, &g).scale(T::lit(1.0 / PIXEL_MAX));
        dup.add_assign(&dz);
        cache.resize.backward(&cache.resize_cache, &dup)
    }
}

impl<T: Real> Module<T> for SrGenerator<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.blocks.visit_params(&join(prefix, "blocks"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        self.projection.visit_params(&join(prefix, "projection"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.blocks.visit_params_mut(&join(prefix, "blocks"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
        self.projection.visit_params_mut(&join(prefix, "projection"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrDiscriminatorConfig {
    /// Width of the first layer; later layers use 1, 2, 4 and 8 times this.
    pub base_channels: usize,
}

impl Default for SrDiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64 }
    }
}

impl SrDiscriminatorConfig {
    pub const LAYERS: usize = 10;

    /// Output channels of each conv layer.
    pub fn widths(&self) -> Vec<usize> {
        const MULT: [usize; 10] = [1, 1, 2, 2, 4, 4, 8, 8, 8, 8];
        MULT.iter().map(|m| m * self.base_channels).collect()
    }

    /// Smallest square input that survives the five stride-2 stages.
    pub fn min_input(&self) -> usize {
        32
    }
}

/// Ten conv layers alternating 3x3/stride 1 and 4x4/stride 2, batch norm on
/// all but the first, leaky relu throughout, then global average pooling and
/// a linear head.
#[derive(Clone, Debug)]
pub struct SrDiscriminator<T> {
    pub config: SrDiscriminatorConfig,
    pub layers: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
}

pub struct SrDiscriminatorCache<T> {
    layers: Vec<ConvBlockCache<T>>,
    pooled_from: Vec<usize>,
    head: ConvCache<T>,
}

impl<T: Real> SrDiscriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: SrDiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::Config("sr discriminator width must be positive".into()));
        }
        let mut layers = Vec::with_capacity(SrDiscriminatorConfig::LAYERS);
        let mut in_ch = 3;
        for (i, out) in config.widths().into_iter().enumerate() {
            let conv = if i % 2 == 0 {
                Conv2d::new(in_ch, out, 3, 1, 1, Padding::Zero, true, rng)
            } else {
                Conv2d::new(in_ch, out, 4, 2, 1, Padding::Zero, true, rng)
            };
            layers.push(ConvBlock::new(conv, i > 0, true));
            in_ch = out;
        }
        let head = Conv2d::new(in_ch, 1, 1, 1, 0, Padding::Zero, true, rng);
        Ok(Self { config, layers, head })
    }

    /// Returns `[n, 1, 1, 1]` scores.
    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, SrDiscriminatorCache<T>)> {
        let (_, c, h, w) = x.try_dims4()?;
        let min = self.config.min_input();
        if c != 3 || h < min || w < min {
            return Err(Error::shape(format!(
                "sr discriminator needs 3 channels and at least {min}x{min}, got {c}x{h}x{w}"
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut hcur = x.clone();
        for l in &mut self.layers {
            let (y, c) = l.forward(&hcur, mode)?;
            hcur = y;
            caches.push(c);
        }
        let pooled_from = hcur.shape().to_vec();
        let pooled = global_avg_pool(&hcur);
        let (scores, head) = self.head.forward(&pooled)?;
        Ok((
            scores,
            SrDiscriminatorCache {
                layers: caches,
                pooled_from,
                head,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SrDiscriminatorCache<T>, dscores: &Tensor<T>) -> Tensor<T> {
        let g = self.head.backward(&cache.head, dscores);
        let mut g = global_avg_pool_backward(&cache.pooled_from, &g);
        for (l, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = l.backward(c, &g);
        }
        g
    }
}

impl<T: Real> Module<T> for SrDiscriminator<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.layers.visit_params(&join(prefix, "layers"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.layers.visit_params_mut(&join(prefix, "layers"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.layers.visit_buffers(&join(prefix, "layers"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.layers.visit_buffers_mut(&join(prefix, "layers"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::resize_bicubic;
    use crate::nets::count_parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SrGeneratorConfig {
        SrGeneratorConfig {
            channels: 8,
            num_resblocks: 2,
            ..SrGeneratorConfig::default()
        }
    }

    #[test]
    fn default_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = SrGenerator::<f32>::new(SrGeneratorConfig::default(), &mut rng).unwrap();
        let n = count_parameters(&g.param_tree());
        assert_eq!(n, 4864 + 5 * 82_048 + 4803 + 1);
        assert!((323_000..=437_000).contains(&n));
    }

    #[test]
    fn alpha_schedule() {
        assert_eq!(alpha_init(1), vec![2.0]);
        let a = alpha_init(3);
        assert!((a[0] - 2.0).abs() < 1e-12 && (a[1] - 2f64.sqrt()).abs() < 1e-12 && (a[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_inside_ball_is_identity() {
        let p = Projection::<f64>::new(1);
        let r = Tensor::full(&[1, 1, 8, 8], 4.0);
        let (out, _) = p.forward(&r, &[8.0]).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn projection_zero_sigma_and_zero_residual() {
        let p = Projection::<f64>::new(1);
        let r = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64 - 10.0);
        let (out, _) = p.forward(&r, &[0.0]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let z = Tensor::zeros(&[1, 3, 4, 4]);
        assert_eq!(p.forward(&z, &[5.0]).unwrap().0, z);
    }

    #[test]
    fn projection_rejects_negative_sigma() {
        let p = Projection::<f64>::new(1);
        let r = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(p.forward(&r, &[-1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn clip_cases() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 1, 3], vec![-12.5, 300.0, 17.25]).unwrap();
        assert_eq!(clip_output(&x).data(), [0.0, 255.0, 17.25]);
        let inside = Tensor::<f32>::from_fn(&[1, 3, 5, 5], |i| (i * 3 % 256) as f32);
        assert_eq!(clip_output(&inside), inside);
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = SrGenerator::<f32>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.gen_range(0.0..255.0f32));
        let y = g.infer(&x, &[3.0, 9.0]).unwrap();
        assert_eq!(y.shape(), [2, 3, 128, 128]);
        assert!(y.min_value() >= 0.0 && y.max_value() <= 255.0);
    }

    #[test]
    fn zero_residual_is_bicubic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = SrGenerator::<f32>::new(tiny(), &mut rng).unwrap();
        g.decoder.zero();
        let x = Tensor::from_fn(&[1, 3, 12, 10], |_| rng.gen_range(0.0..255.0f32));
        let y = g.infer(&x, &[10.0]).unwrap();
        let reference = clip_output(&resize_bicubic(&x, 4.0, true).unwrap());
        assert!(y.sub(&reference).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn forward_matches_infer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = SrGenerator::<f32>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(0.0..255.0f32));
        assert_eq!(g.forward(&x, &[2.0]).unwrap().0, g.infer(&x, &[2.0]).unwrap());
    }

    #[test]
    fn discriminator_scores_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = SrDiscriminator::<f32>::new(SrDiscriminatorConfig { base_channels: 4 }, &mut rng).unwrap();
        let a = Tensor::from_fn(&[1, 3, 128, 128], |_| rng.gen_range(0.0..255.0f32));
        let b = Tensor::from_fn(&[1, 3, 128, 128], |_| rng.gen_range(0.0..255.0f32));
        let batch = Tensor::concat_batch(&[a.clone(), b, a]).unwrap();
        let (s, _) = d.forward(&batch, BnMode::Eval).unwrap();
        assert_eq!(s.shape(), [3, 1, 1, 1]);
        assert!(s.is_finite());
        assert_eq!(s.data()[0], s.data()[2]);
    }

    #[test]
    fn discriminator_rejects_small_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = SrDiscriminator::<f32>::new(SrDiscriminatorConfig { base_channels: 2 }, &mut rng).unwrap();
        assert!(d.forward(&Tensor::zeros(&[1, 3, 32, 32]), BnMode::Eval).is_ok());
        assert!(matches!(d.forward(&Tensor::zeros(&[1, 3, 31, 64]), BnMode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn default_discriminator_widths() {
        let w = SrDiscriminatorConfig::default().widths();
        assert_eq!(w.first(), Some(&64));
        assert_eq!(w.last(), Some(&512));
        assert_eq!(w.len(), SrDiscriminatorConfig::LAYERS);
    }
}
