//! Separable resampling with the conventions of MATLAB's `imresize`:
//! half-pixel-centred sampling, symmetric (edge-repeating) borders, weights
//! renormalised to sum to one, and kernel stretching when downscaling with
//! antialiasing enabled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKernel {
    /// Keys cubic with `a = -0.5`.
    Bicubic,
    Bilinear,
    Nearest,
}

impl ResampleKernel {
    fn support(self) -> f64 {
        match self {
            ResampleKernel::Bicubic => 4.0,
            ResampleKernel::Bilinear => 2.0,
            ResampleKernel::Nearest => 1.0,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ResampleKernel::Bicubic => cubic(x),
            ResampleKernel::Bilinear => (1.0 - x.abs()).max(0.0),
            ResampleKernel::Nearest => {
                if (-0.5..0.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Keys cubic convolution kernel, `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Output length for a scale factor, `ceil(len * scale)`.
pub fn scaled_len(len: usize, scale: f64) -> Result<usize> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    let out = (len as f64 * scale - 1e-9).ceil();
    if out < 1.0 {
        return Err(Error::invalid(format!("resizing {len} by {scale} leaves no samples")));
    }
    Ok(out as usize)
}

/// Dense `out_len x in_len` row-major resampling matrix.
pub fn resize_matrix(
    in_len: usize,
    out_len: usize,
    kernel: ResampleKernel,
    antialias: bool,
) -> Result<Vec<f64>> {
    if in_len == 0 || out_len == 0 {
        return Err(Error::invalid(format!(
            "resize lengths must be positive, got {in_len} -> {out_len}"
        )));
    }
    let scale = out_len as f64 / in_len as f64;
    let stretch = antialias && scale < 1.0 && kernel != ResampleKernel::Nearest;
    let width = if stretch { kernel.support() / scale } else { kernel.support() };
    let taps = width.ceil() as isize + 2;
    let mut m = vec![0.0; out_len * in_len];
    let mut weights = vec![0.0; taps as usize];
    for j in 0..out_len {
        // 1-based output coordinate mapped into 1-based input space.
        let u = (j + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as isize;
        for (t, w) in weights.iter_mut().enumerate() {
            let idx = left + t as isize;
            let d = u - idx as f64;
            *w = if stretch { scale * kernel.eval(scale * d) } else { kernel.eval(d) };
        }
        let total: f64 = weights.iter().sum();
        for (t, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let src = symmetric_index(left + t as isize - 1, in_len);
            m[j * in_len + src] += w / total;
        }
    }
    Ok(m)
}

/// Symmetric border extension with edge repetition (`[b a | a b c | c b]`).
fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

/// Resizes every plane of `[n, c, h, w]` to `out_h x out_w`.
pub fn resize_to<T: Real>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    kernel: ResampleKernel,
    antialias: bool,
) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.try_dims4()?;
    let rows: Vec<T> = resize_matrix(h, out_h, kernel, antialias)?.into_iter().map(T::lit).collect();
    let cols: Vec<T> = resize_matrix(w, out_w, kernel, antialias)?.into_iter().map(T::lit).collect();
    Ok(apply_separable(img, &rows, out_h, &cols, out_w))
}

/// `Y = R X C^T` for every plane, with `R: out_h x h` and `C: out_w x w`.
pub(crate) fn apply_separable<T: Real>(
    img: &Tensor<T>,
    rows: &[T],
    out_h: usize,
    cols: &[T],
    out_w: usize,
) -> Tensor<T> {
    let (n, c, h, w) = img.dims4();
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let mut tmp = vec![T::zero(); out_h * w];
    let src = img.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        gemm(out_h, h, w, rows, false, &src[p * h * w..(p + 1) * h * w], false, &mut tmp, T::zero());
        gemm(out_h, w, out_w, &tmp, false, cols, true, &mut dst[p * out_h * out_w..(p + 1) * out_h * out_w], T::zero());
    }
    out
}

/// Bicubic resize by a scale factor; antialiasing only affects downscaling.
pub fn resize_bicubic<T: Real>(img: &Tensor<T>, scale: f64, antialias: bool) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.try_dims4()?;
    resize_to(img, scaled_len(h, scale)?, scaled_len(w, scale)?, ResampleKernel::Bicubic, antialias)
}
