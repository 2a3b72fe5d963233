use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Half-width `sqrt(6 / fan_in)` of the sine-weight initialization interval.
pub fn siren_bound(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::invalid("fan_in must be positive"));
    }
    Ok((6.0 / fan_in as f64).sqrt())
}

/// Draws every entry i.i.d. from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn siren_init<T: Real, R: Rng + ?Sized>(
    fan_in: usize,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor<T>> {
    let bound = siren_bound(fan_in)?;
    Ok(uniform(bound, shape, rng))
}

/// Convolution weight init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(
    fan_in: usize,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::invalid("fan_in must be positive"));
    }
    Ok(uniform(1.0 / (fan_in as f64).sqrt(), shape, rng))
}

fn uniform<T: Real, R: Rng + ?Sized>(bound: f64, shape: &[usize], rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
