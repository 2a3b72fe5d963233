//! Slow direct reference implementations.

use sinesr::Tensor;

/// Kolmogorov distribution tail `P(K > t)`.
pub fn kolmogorov_tail(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * k * k * t * t).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS statistic and asymptotic p-value against `U(lo, hi)`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).max((i + 1) as f64 / n - cdf)
        })
        .fold(0.0, f64::max);
    (d, kolmogorov_tail(d * n.sqrt()))
}

fn keys(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror an out-of-range index back into `0..n` by repeated reflection
/// about the outer pixel edges.
fn mirror(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Weights of every input sample for output sample `j` (0-based) along one
/// axis, with the kernel stretched by `1/scale` when shrinking.
fn axis_weights(j: usize, in_len: usize, out_len: usize) -> Vec<f64> {
    let scale = out_len as f64 / in_len as f64;
    let shrink = scale.min(1.0);
    // centre of output pixel j in input pixel coordinates (0-based centres)
    let centre = (j as f64 + 0.5) / scale - 0.5;
    let reach = (2.0 / shrink).ceil() as i64 + 1;
    let mut w = vec![0.0; in_len];
    let mut total = 0.0;
    let c = centre.floor() as i64;
    for k in c - reach..=c + reach {
        let v = shrink * keys(shrink * (centre - k as f64));
        w[mirror(k, in_len as i64)] += v;
        total += v;
    }
    w.iter().map(|v| v / total).collect()
}

/// Direct two-dimensional bicubic resampling of one `[1, c, h, w]` image.
pub fn bicubic(img: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (_, c, h, w) = img.dims4();
    let wy: Vec<_> = (0..oh).map(|i| axis_weights(i, h, oh)).collect();
    let wx: Vec<_> = (0..ow).map(|j| axis_weights(j, w, ow)).collect();
    let mut out = Tensor::zeros(&[1, c, oh, ow]);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += wy[i][y] * wx[j][x] * img.at4(0, ch, y, x);
                    }
                }
                out.set4(0, ch, i, j, acc);
            }
        }
    }
    out
}

/// SSIM with an explicit 2-D Gaussian window evaluated at every valid
/// position, dynamic range 255.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (n, c, h, w) = a.dims4();
    let size = 11usize;
    let mut win = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            win[y * size + x] = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    let mut count = 0.0;
    for item in 0..n {
        for ch in 0..c {
            for y0 in 0..=h - size {
                for x0 in 0..=w - size {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for y in 0..size {
                        for x in 0..size {
                            let k = win[y * size + x];
                            ma += k * a.at4(item, ch, y0 + y, x0 + x);
                            mb += k * b.at4(item, ch, y0 + y, x0 + x);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for y in 0..size {
                        for x in 0..size {
                            let k = win[y * size + x];
                            let p = a.at4(item, ch, y0 + y, x0 + x) - ma;
                            let q = b.at4(item, ch, y0 + y, x0 + x) - mb;
                            va += k * p * p;
                            vb += k * q * q;
                            cov += k * p * q;
                        }
                    }
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
        }
    }
    total / count
}
