use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Median absolute deviation of a standard normal variable.
pub const MAD_NORMALIZER: f64 = 0.6745;

/// Robust noise standard deviation from the finest-scale diagonal Haar
/// wavelet coefficients: `median(|HH|) / 0.6745`, pooled over all channels
/// and batch items. Units follow the image (8-bit scale for `[0, 255]`).
pub fn estimate_sigma<T: Real>(img: &Tensor<T>) -> Result<f64> {
    let (n, c, h, w) = img.try_dims4()?;
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!(
            "noise estimation needs at least 16x16, got {h}x{w}"
        )));
    }
    let (bh, bw) = (h / 2, w / 2);
    let mut coeffs = Vec::with_capacity(n * c * bh * bw);
    for plane in img.data().chunks(h * w).take(n * c) {
        for by in 0..bh {
            let r0 = &plane[2 * by * w..];
            let r1 = &plane[(2 * by + 1) * w..];
            for bx in 0..bw {
                let (a, b) = (r0[2 * bx].as_f64(), r0[2 * bx + 1].as_f64());
                let (cc, d) = (r1[2 * bx].as_f64(), r1[2 * bx + 1].as_f64());
                coeffs.push(((a - b - cc + d) * 0.5).abs());
            }
        }
    }
    Ok(median(&mut coeffs) / MAD_NORMALIZER)
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}
