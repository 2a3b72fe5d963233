//! Training objectives for both stages. Every loss returns its value together
//! with the gradient with respect to its first (generated) argument, or with
//! respect to the scores for the adversarial terms.

mod features;

use serde::{Deserialize, Serialize};

pub(crate) use features::tensor_from_view;
pub use features::{load_extractor, ConvFeatures, ExtractorConfig, FeatureCache, FeatureExtractor, Stage};

use crate::degradation::resize::apply_separable;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probability floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

pub const TEXTURE_WEIGHT: f64 = 0.005;
pub const LR_PERCEPTUAL_WEIGHT: f64 = 0.01;
pub const CONTENT_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct Loss<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Adversarial loss with gradients for both score batches.
#[derive(Clone, Debug)]
pub struct ScoreLoss<T> {
    pub value: f64,
    pub d_real: Tensor<T>,
    pub d_fake: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBand {
    Low,
    High,
}

/// Moving-average low-pass `w_L` with reflect borders and its complement
/// `w_H = I - w_L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrequencyFilter {
    pub size: usize,
}

impl FrequencyFilter {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("low-pass size must be odd, got {size}")));
        }
        Ok(Self { size })
    }

    /// Dense `n x n` band matrix of the 1-D box with reflect borders.
    fn band<T: Real>(&self, n: usize) -> Result<Vec<T>> {
        let half = self.size / 2;
        if half >= n.max(1) && self.size > 1 {
            return Err(Error::shape(format!("low-pass size {} does not fit {n} samples", self.size)));
        }
        let tap = 1.0 / self.size as f64;
        let mut m = vec![T::zero(); n * n];
        for i in 0..n {
            for t in 0..self.size {
                let j = reflect(i as isize + t as isize - half as isize, n);
                m[i * n + j] += T::lit(tap);
            }
        }
        Ok(m)
    }

    pub fn low<T: Real>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = img.try_dims4()?;
        Ok(apply_separable(img, &self.band(h)?, h, &self.band(w)?, w))
    }

    pub fn high<T: Real>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        img.sub(&self.low(img)?)
    }

    pub fn apply<T: Real>(&self, img: &Tensor<T>, band: FrequencyBand) -> Result<Tensor<T>> {
        match band {
            FrequencyBand::Low => self.low(img),
            FrequencyBand::High => self.high(img),
        }
    }

    /// Adjoint of [`FrequencyFilter::low`].
    pub fn low_adjoint<T: Real>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = dy.try_dims4()?;
        let rows = transpose(&self.band::<T>(h)?, h);
        let cols = transpose(&self.band::<T>(w)?, w);
        Ok(apply_separable(dy, &rows, h, &cols, w))
    }

    pub fn high_adjoint<T: Real>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        dy.sub(&self.low_adjoint(dy)?)
    }
}

/// Reflection without edge repetition (`[c b | a b c | b a]`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

fn transpose<T: Copy>(m: &[T], n: usize) -> Vec<T> {
    let mut t = m.to_vec();
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j];
        }
    }
    t
}

/// Convenience wrapper over [`FrequencyFilter`].
pub fn frequency_filter<T: Real>(img: &Tensor<T>, band: FrequencyBand, size: usize) -> Result<Tensor<T>> {
    FrequencyFilter::new(size)?.apply(img, band)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute error and its subgradient (zero at ties).
pub fn l1_mean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Loss<T>> {
    a.check_same_shape(b)?;
    let n = a.numel().max(1) as f64;
    let inv = T::lit(1.0 / n);
    let diff = a.sub(b)?;
    let value = diff.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / n;
    Ok(Loss {
        value,
        grad: diff.map(|v| sign(v) * inv),
    })
}

/// Content term: mean absolute error over every element of the batch.
pub fn content_loss<T: Real>(gen: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>> {
    l1_mean(gen, target)
}

/// Mean absolute error between the low-pass components.
pub fn color_loss<T: Real>(gen: &Tensor<T>, target: &Tensor<T>, filter: &FrequencyFilter) -> Result<Loss<T>> {
    gen.check_same_shape(target)?;
    let diff = filter.low(&gen.sub(target)?)?;
    let n = diff.numel().max(1) as f64;
    let value = diff.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / n;
    let inv = T::lit(1.0 / n);
    let grad = filter.low_adjoint(&diff.map(|v| sign(v) * inv))?;
    Ok(Loss { value, grad })
}

/// `-log(clamp(sigmoid(x), floor, 1))` and its derivative (zero once clamped).
fn neg_log_sigmoid(x: f64) -> (f64, f64) {
    // -log(sigmoid(x)) = softplus(-x), computed stably.
    let v = if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
    let cap = -LOG_FLOOR.ln();
    if v >= cap {
        (cap, 0.0)
    } else {
        let s_neg = if x >= 0.0 {
            let e = (-x).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + x.exp())
        };
        (v, -s_neg)
    }
}

/// Generator texture term on patch scores of the high-passed generated image:
/// `-mean(log sigmoid(score))`.
pub fn texture_loss<T: Real>(scores: &Tensor<T>) -> Result<Loss<T>> {
    if scores.numel() == 0 {
        return Err(Error::invalid("texture loss needs at least one score"));
    }
    let (value, grad) = mean_terms(scores, true);
    Ok(Loss { value, grad })
}

fn mean_terms<T: Real>(scores: &Tensor<T>, positive: bool) -> (f64, Tensor<T>) {
    let n = scores.numel() as f64;
    let mut total = 0.0;
    let mut grad = scores.clone();
    for g in grad.data_mut() {
        let x = g.as_f64();
        let (v, d) = if positive {
            neg_log_sigmoid(x)
        } else {
            let (v, d) = neg_log_sigmoid(-x);
            (v, -d)
        };
        total += v;
        *g = T::lit(d / n);
    }
    (total / n, grad)
}

/// Standard discriminator cross-entropy:
/// `-mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake)))`.
pub fn discriminator_bce<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<ScoreLoss<T>> {
    if real.numel() == 0 || fake.numel() == 0 {
        return Err(Error::invalid("discriminator loss needs non-empty score batches"));
    }
    let (vr, d_real) = mean_terms(real, true);
    let (vf, d_fake) = mean_terms(fake, false);
    Ok(ScoreLoss {
        value: vr + vf,
        d_real,
        d_fake,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RaganSide {
    Generator,
    Discriminator,
}

/// Relativistic average loss.
///
/// With `D(a, b) = sigmoid(C(a) - mean C(b))`, the generator minimises
/// `-E[log(1 - D(real, fake))] - E[log D(fake, real)]` and the discriminator
/// the mirrored `-E[log D(real, fake)] - E[log(1 - D(fake, real))]`.
pub fn ragan_loss<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, side: RaganSide) -> Result<ScoreLoss<T>> {
    if real.numel() == 0 || fake.numel() == 0 {
        return Err(Error::invalid("relativistic loss needs non-empty score batches"));
    }
    let nr = real.numel() as f64;
    let nf = fake.numel() as f64;
    let mean_r = real.data().iter().map(|v| v.as_f64()).sum::<f64>() / nr;
    let mean_f = fake.data().iter().map(|v| v.as_f64()).sum::<f64>() / nf;
    // u acts on real-minus-mean-fake, v on fake-minus-mean-real; each returns
    // (-log p, d/dx).
    let term = |x: f64, want_one: bool| -> (f64, f64) {
        if want_one {
            neg_log_sigmoid(x)
        } else {
            let (v, d) = neg_log_sigmoid(-x);
            (v, -d)
        }
    };
    let (real_wants_one, fake_wants_one) = match side {
        RaganSide::Generator => (false, true),
        RaganSide::Discriminator => (true, false),
    };
    let mut value = 0.0;
    let mut du = Vec::with_capacity(real.numel());
    for &c in real.data() {
        let (v, d) = term(c.as_f64() - mean_f, real_wants_one);
        value += v / nr;
        du.push(d / nr);
    }
    let mut dv = Vec::with_capacity(fake.numel());
    for &c in fake.data() {
        let (v, d) = term(c.as_f64() - mean_r, fake_wants_one);
        value += v / nf;
        dv.push(d / nf);
    }
    let sum_du: f64 = du.iter().sum();
    let sum_dv: f64 = dv.iter().sum();
    let d_real = Tensor::from_vec(real.shape(), du.iter().map(|d| T::lit(d - sum_dv / nr)).collect())?;
    let d_fake = Tensor::from_vec(fake.shape(), dv.iter().map(|d| T::lit(d - sum_du / nf)).collect())?;
    Ok(ScoreLoss { value, d_real, d_fake })
}

/// `(generator_loss, discriminator_loss)` for one pair of score batches.
pub fn ragan_losses<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(f64, f64)> {
    Ok((
        ragan_loss(real, fake, RaganSide::Generator)?.value,
        ragan_loss(real, fake, RaganSide::Discriminator)?.value,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvReduction {
    /// Sum of absolute gradient differences per image, averaged over the batch.
    #[default]
    SumPerImage,
    /// Mean of each directional difference map, summed over the two directions.
    MeanPerElement,
}

/// Total-variation discrepancy with forward differences.
pub fn tv_loss<T: Real>(gen: &Tensor<T>, target: &Tensor<T>, reduction: TvReduction) -> Result<Loss<T>> {
    gen.check_same_shape(target)?;
    let (n, c, h, w) = gen.try_dims4()?;
    let d = gen.sub(target)?;
    let (scale_h, scale_v) = match reduction {
        TvReduction::SumPerImage => (1.0 / n as f64, 1.0 / n as f64),
        TvReduction::MeanPerElement => {
            let nh = n * c * h * w.saturating_sub(1);
            let nv = n * c * h.saturating_sub(1) * w;
            (1.0 / nh.max(1) as f64, 1.0 / nv.max(1) as f64)
        }
    };
    let mut value = 0.0;
    let mut grad = Tensor::zeros(gen.shape());
    let src = d.data();
    let g = grad.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                if x + 1 < w {
                    let diff = src[i + 1] - src[i];
                    value += diff.as_f64().abs() * scale_h;
                    let s = sign(diff) * T::lit(scale_h);
                    g[i + 1] += s;
                    g[i] -= s;
                }
                if y + 1 < h {
                    let diff = src[i + w] - src[i];
                    value += diff.as_f64().abs() * scale_v;
                    let s = sign(diff) * T::lit(scale_v);
                    g[i + w] += s;
                    g[i] -= s;
                }
            }
        }
    }
    Ok(Loss { value, grad })
}

/// Mean l1 distance between features, averaged over taps. The gradient is
/// with respect to `gen`; the extractor stays frozen.
pub fn perceptual_loss<T: Real, F: FeatureExtractor<T> + ?Sized>(
    gen: &Tensor<T>,
    target: &Tensor<T>,
    fx: &mut F,
) -> Result<Loss<T>> {
    gen.check_same_shape(target)?;
    let (fg, cache) = fx.forward(gen)?;
    let ft = fx.features(target)?;
    if fg.len() != ft.len() || fg.is_empty() {
        return Err(Error::shape("feature extractor returned inconsistent taps"));
    }
    let k = fg.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(fg.len());
    for (a, b) in fg.iter().zip(&ft) {
        let l = l1_mean(a, b).map_err(|e| Error::shape(format!("feature extractor contract violated: {e}")))?;
        value += l.value / k;
        grads.push(l.grad.scale(T::lit(1.0 / k)));
    }
    Ok(Loss {
        value,
        grad: fx.backward(&cache, &grads),
    })
}

/// Parts of the degradation-stage generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrLossParts {
    pub color: f64,
    pub tex: f64,
    pub per: f64,
}

impl LrLossParts {
    pub fn total(&self) -> f64 {
        lr_total_loss(self.color, self.tex, self.per)
    }
}

pub fn lr_total_loss(color: f64, tex: f64, per: f64) -> f64 {
    color + TEXTURE_WEIGHT * tex + LR_PERCEPTUAL_WEIGHT * per
}

/// Parts of the super-resolution generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SrLossParts {
    pub per: f64,
    pub gan: f64,
    pub tv: f64,
    pub l1: f64,
}

impl SrLossParts {
    pub fn total(&self) -> f64 {
        sr_total_loss(self.per, self.gan, self.tv, self.l1)
    }
}

pub fn sr_total_loss(per: f64, gan: f64, tv: f64, l1: f64) -> f64 {
    per + gan + tv + CONTENT_WEIGHT * l1
}
