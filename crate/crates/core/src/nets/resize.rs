use crate::degradation::{resize_matrix, ResampleKernel};
use crate::error::Result;
use crate::tensor::{gemm, Real, Tensor};

/// Differentiable separable resampler (fixed, no learnable state).
#[derive(Clone, Debug)]
pub struct Resize<T> {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<T>,
    cols: Vec<T>,
}

pub struct ResizeCache {
    batch: usize,
    channels: usize,
}

impl<T: Real> Resize<T> {
    pub fn new(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        kernel: ResampleKernel,
        antialias: bool,
    ) -> Result<Self> {
        let cast = |m: Vec<f64>| m.into_iter().map(T::lit).collect();
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: cast(resize_matrix(in_h, out_h, kernel, antialias)?),
            cols: cast(resize_matrix(in_w, out_w, kernel, antialias)?),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ResizeCache)> {
        let (n, c, h, w) = x.try_dims4()?;
        if (h, w) != (self.in_h, self.in_w) {
            return Err(crate::error::Error::shape(format!(
                "resizer built for {}x{}, got {h}x{w}",
                self.in_h, self.in_w
            )));
        }
        let y = crate::degradation::resize::apply_separable(x, &self.rows, self.out_h, &self.cols, self.out_w);
        Ok((y, ResizeCache { batch: n, channels: c }))
    }

    /// `dX = R^T dY C` for every plane.
    pub fn backward(&self, cache: &ResizeCache, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let planes = cache.batch * cache.channels;
        let mut dx = Tensor::zeros(&[cache.batch, cache.channels, h, w]);
        let mut tmp = vec![T::zero(); oh * w];
        let src = dy.data();
        let dst = dx.data_mut();
        for p in 0..planes {
            gemm(oh, ow, w, &src[p * oh * ow..(p + 1) * oh * ow], false, &self.cols, false, &mut tmp, T::zero());
            gemm(h, oh, w, &self.rows, true, &tmp, false, &mut dst[p * h * w..(p + 1) * h * w], T::zero());
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <R x, y> == <x, R^T y>
        let r = Resize::<f64>::new(5, 6, 20, 24, ResampleKernel::Bicubic, true).unwrap();
        let x = Tensor::from_fn(&[1, 2, 5, 6], |i| ((i * 17) % 9) as f64 - 4.0);
        let y = Tensor::from_fn(&[1, 2, 20, 24], |i| ((i * 13) % 7) as f64 - 3.0);
        let (rx, cache) = r.forward(&x).unwrap();
        let rty = r.backward(&cache, &y);
        let lhs: f64 = rx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(rty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
