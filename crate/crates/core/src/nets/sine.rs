use rand::Rng;

use super::{init::siren_init, join, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Sinusoidal activation `sin(omega0 * W f)`, where `W` mixes channels
/// independently at every spatial position.
#[derive(Clone, Debug)]
pub struct SineLayer<T> {
    pub omega0: f64,
    /// `[out, in]` channel-mixing matrix.
    pub weight: Param<T>,
}

pub struct SineCache<T> {
    input: Tensor<T>,
    /// `omega0 * cos(omega0 * W f)`, the pointwise derivative.
    slope: Tensor<T>,
}

impl<T: Real> SineLayer<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, omega0: f64, rng: &mut R) -> Self {
        let weight = siren_init(in_ch, &[out_ch, in_ch], rng).expect("sine fan-in is positive");
        Self {
            omega0,
            weight: Param::new(weight),
        }
    }

    pub fn from_weight(weight: Tensor<T>, omega0: f64) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape(format!("sine weight must be [out, in], got {:?}", weight.shape())));
        }
        Ok(Self {
            omega0,
            weight: Param::new(weight),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn mix(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = f.try_dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "sine layer expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let cout = self.out_channels();
        let p = h * w;
        let mut z = Tensor::zeros(&[n, cout, h, w]);
        for b in 0..n {
            gemm(cout, c, p, self.weight.value.data(), false, f.item(b), false, z.item_mut(b), T::zero());
        }
        Ok(z)
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<(Tensor<T>, SineCache<T>)> {
        let w0 = T::lit(self.omega0);
        let mut z = self.mix(f)?;
        let mut slope = z.clone();
        slope.map_inplace(|v| w0 * (w0 * v).cos());
        z.map_inplace(|v| (w0 * v).sin());
        Ok((
            z,
            SineCache {
                input: f.clone(),
                slope,
            },
        ))
    }

    pub fn infer(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let w0 = T::lit(self.omega0);
        let mut z = self.mix(f)?;
        z.map_inplace(|v| (w0 * v).sin());
        Ok(z)
    }

    pub fn backward(&mut self, cache: &SineCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dz = dy.zip_map(&cache.slope, |g, s| g * s).expect("sine backward shape");
        let (n, cin, h, w) = cache.input.dims4();
        let cout = self.out_channels();
        let p = h * w;
        let mut df = Tensor::zeros(&[n, cin, h, w]);
        for b in 0..n {
            if !self.weight.frozen {
                gemm(cout, p, cin, dz.item(b), false, cache.input.item(b), true, self.weight.grad.data_mut(), T::one());
            }
            gemm(cin, cout, p, self.weight.value.data(), true, dz.item(b), false, df.item_mut(b), T::zero());
        }
        df
    }
}

impl<T: Real> Module<T> for SineLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}
