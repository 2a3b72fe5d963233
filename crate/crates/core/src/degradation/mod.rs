//! Classical degradation synthesis `y = (k * x) downsampled by s + noise`,
//! followed by an optional JPEG round trip, and noise-level estimation.

pub(crate) mod jpeg;
mod noise;
pub(crate) mod resize;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use jpeg::jpeg_roundtrip;
pub use noise::{estimate_sigma, MAD_NORMALIZER};
pub use resize::{cubic, resize_bicubic, resize_matrix, resize_to, scaled_len, ResampleKernel};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Blur {
    None,
    Gaussian { std: f64, kernel_size: usize },
}

impl Blur {
    pub fn default_gaussian() -> Self {
        Blur::Gaussian {
            std: 1.2,
            kernel_size: 7,
        }
    }
}

/// One instantiation of the classical degradation chain. Intensities are on
/// the 8-bit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    pub blur: Blur,
    pub downsampler: ResampleKernel,
    pub scale: usize,
    /// Standard deviation of the additive white Gaussian noise.
    pub sigma: f64,
    pub jpeg_quality: Option<u8>,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            blur: Blur::None,
            downsampler: ResampleKernel::Bicubic,
            scale: 4,
            sigma: 0.0,
            jpeg_quality: None,
        }
    }
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self {
            scale: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::invalid("degradation scale must be at least 1"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if let Blur::Gaussian { std, kernel_size } = self.blur {
            if kernel_size % 2 == 0 {
                return Err(Error::invalid(format!("blur kernel size must be odd, got {kernel_size}")));
            }
            if !(std.is_finite() && std > 0.0) {
                return Err(Error::invalid(format!("blur std must be positive, got {std}")));
            }
        }
        if let Some(q) = self.jpeg_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::invalid(format!("jpeg quality must be in 1..=100, got {q}")));
            }
        }
        Ok(())
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(std: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * std * std)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with symmetric (edge-repeating) borders.
pub fn gaussian_blur<T: Real>(img: &Tensor<T>, std: f64, size: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.try_dims4()?;
    let taps = gaussian_kernel(std, size);
    let band = |n: usize| -> Vec<T> {
        let mut m = vec![T::zero(); n * n];
        let half = (size / 2) as isize;
        for i in 0..n {
            for (t, &k) in taps.iter().enumerate() {
                let j = mirror(i as isize + t as isize - half, n);
                m[i * n + j] += T::lit(k);
            }
        }
        m
    };
    Ok(resize::apply_separable(img, &band(h), h, &band(w), w))
}

fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise in row-major order.
pub fn add_gaussian_noise<T: Real, R: Rng + ?Sized>(img: &mut Tensor<T>, sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in img.data_mut() {
        *v += T::lit(normal.sample(rng));
    }
}

/// Runs the chain blur -> downsample -> AWGN -> JPEG on an 8-bit-scale image.
/// Stages that are disabled in `spec` are skipped entirely, so the identity
/// spec returns the input unchanged.
pub fn degrade<T: Real, R: Rng + ?Sized>(
    img_hr: &Tensor<T>,
    spec: &DegradationSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (_, _, h, w) = img_hr.try_dims4()?;
    let mut out = match spec.blur {
        Blur::None => img_hr.clone(),
        Blur::Gaussian { std, kernel_size } => gaussian_blur(img_hr, std, kernel_size)?,
    };
    if spec.scale > 1 {
        let (oh, ow) = (h / spec.scale, w / spec.scale);
        if oh == 0 || ow == 0 {
            return Err(Error::invalid(format!("{h}x{w} image too small for scale {}", spec.scale)));
        }
        // Crop to a multiple of the scale so LR/HR correspond exactly.
        if oh * spec.scale != h || ow * spec.scale != w {
            out = out.crop(0, 0, oh * spec.scale, ow * spec.scale)?;
        }
        out = resize_to(&out, oh, ow, spec.downsampler, true)?;
    }
    if spec.sigma > 0.0 {
        add_gaussian_noise(&mut out, spec.sigma, rng);
        out.map_inplace(|v| v.max(T::zero()).min(T::lit(255.0)));
    }
    if let Some(q) = spec.jpeg_quality {
        out = jpeg_roundtrip(&out, q)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_spec_is_exact() {
        let img = Tensor::<f32>::from_fn(&[1, 3, 9, 11], |i| ((i * 31) % 256) as f32 + 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(degrade(&img, &DegradationSpec::identity(), &mut rng).unwrap(), img);
    }

    #[test]
    fn gaussian_taps_are_normalised_and_symmetric() {
        let k = gaussian_kernel(1.2, 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!((k[i] - k[6 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_keeps_constants() {
        let img = Tensor::<f64>::full(&[1, 1, 8, 8], 42.0);
        let out = gaussian_blur(&img, 1.2, 7).unwrap();
        assert!(out.data().iter().all(|v| (v - 42.0).abs() < 1e-10));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = DegradationSpec::default();
        s.scale = 0;
        assert!(s.validate().is_err());
        let mut s = DegradationSpec::default();
        s.blur = Blur::Gaussian { std: 1.0, kernel_size: 4 };
        assert!(s.validate().is_err());
        let mut s = DegradationSpec::default();
        s.sigma = f64::NAN;
        assert!(s.validate().is_err());
        let mut s = DegradationSpec::default();
        s.jpeg_quality = Some(0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn noise_is_reproducible_under_seed() {
        let img = Tensor::<f32>::full(&[1, 1, 32, 32], 128.0);
        let spec = DegradationSpec { scale: 1, sigma: 8.0, ..DegradationSpec::default() };
        let a = degrade(&img, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = degrade(&img, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let c = degrade(&img, &spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn downsampling_crops_to_scale_multiple() {
        let img = Tensor::<f32>::full(&[1, 3, 18, 17], 10.0);
        let spec = DegradationSpec { scale: 4, ..DegradationSpec::default() };
        let out = degrade(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.shape(), [1, 3, 4, 4]);
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = DegradationSpec {
            blur: Blur::default_gaussian(),
            downsampler: ResampleKernel::Bilinear,
            scale: 2,
            sigma: 8.0,
            jpeg_quality: Some(30),
        };
        let text = toml::to_string(&spec).unwrap();
        let back: DegradationSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
