use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init::uniform_fan_in, join, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample (`[c b | a b c | b a]`).
    Reflect,
}

/// Maps padded coordinates `0..n + 2 * pad` to source indices.
pub(crate) fn axis_map(n: usize, pad: usize, mode: Padding) -> Result<Vec<Option<usize>>> {
    if mode == Padding::Reflect && pad > 0 && pad >= n {
        return Err(Error::shape(format!(
            "reflection padding {pad} needs an axis longer than {pad}, got {n}"
        )));
    }
    Ok((0..n + 2 * pad)
        .map(|p| {
            let i = p as isize - pad as isize;
            if i >= 0 && (i as usize) < n {
                Some(i as usize)
            } else {
                match mode {
                    Padding::Zero => None,
                    Padding::Reflect if i < 0 => Some((-i) as usize),
                    Padding::Reflect => Some(2 * (n - 1) - i as usize),
                }
            }
        })
        .collect())
}

/// 2-D convolution `W * x + b` over `[n, c, h, w]` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

pub struct ConvCache<T> {
    input: Tensor<T>,
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl<T: Real> Conv2d<T> {
    /// Kernel drawn from the uniform fan-in law, bias zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = uniform_fan_in(fan_in, &[out_ch, in_ch, kernel, kernel], rng)
            .expect("conv fan-in is positive");
        Self::from_weights(weight, bias.then(|| Tensor::zeros(&[out_ch])), stride, pad, padding)
            .expect("consistent conv shapes")
    }

    pub fn from_weights(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::shape(format!("conv weight must be [out, in, k, k], got {s:?}")));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape(format!("conv bias {:?} vs {} outputs", b.shape(), s[0])));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            stride,
            pad,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// Zeroes kernel and bias.
    pub fn zero(&mut self) {
        self.weight.value.fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.value.fill(T::zero());
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < k || wp < k {
            return Err(Error::shape(format!(
                "input {h}x{w} (padded {hp}x{wp}) smaller than kernel {k}"
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        let (_, cin, h, w) = x.try_dims4()?;
        if cin != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        let (ho, wo) = self.output_size(h, w)?;
        Ok(Geometry {
            cin,
            h,
            w,
            ho,
            wo,
            rows: axis_map(h, self.pad, self.padding)?,
            cols: axis_map(w, self.pad, self.padding)?,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `lo..hi` whose stride-1 source sample is in range and
    /// contiguous for kernel column `kj`.
    fn interior(&self, g: &Geometry, kj: usize) -> (usize, usize) {
        if self.stride != 1 {
            return (0, 0);
        }
        let lo = self.pad.saturating_sub(kj).min(g.wo);
        let hi = (g.w + self.pad).saturating_sub(kj).min(g.wo).max(lo);
        (lo, hi)
    }

    fn im2col(&self, g: &Geometry, item: &[T], cols: &mut [T]) {
        let k = self.kernel();
        let s = self.stride;
        let p = g.ho * g.wo;
        for c in 0..g.cin {
            let plane = &item[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * p;
                    let (lo, hi) = self.interior(g, kj);
                    for oy in 0..g.ho {
                        let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                        match g.rows[oy * s + ki] {
                            None => dst.fill(T::zero()),
                            Some(sy) => {
                                let src = &plane[sy * g.w..(sy + 1) * g.w];
                                if hi > lo {
                                    let off = lo + kj - self.pad;
                                    dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                                }
                                for ox in (0..lo).chain(hi..g.wo) {
                                    dst[ox] = match g.cols[ox * s + kj] {
                                        Some(sx) => src[sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, cols: &[T], item: &mut [T]) {
        let k = self.kernel();
        let s = self.stride;
        let p = g.ho * g.wo;
        for c in 0..g.cin {
            let plane = &mut item[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * p;
                    let (lo, hi) = self.interior(g, kj);
                    for oy in 0..g.ho {
                        let Some(sy) = g.rows[oy * s + ki] else { continue };
                        let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                        let dst = &mut plane[sy * g.w..(sy + 1) * g.w];
                        if hi > lo {
                            let off = lo + kj - self.pad;
                            for (d, &v) in dst[off..off + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        }
                        for ox in (0..lo).chain(hi..g.wo) {
                            if let Some(sx) = g.cols[ox * s + kj] {
                                dst[sx] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let y = self.infer(x)?;
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Forward pass without keeping a cache.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let n = x.dims4().0;
        let cout = self.out_channels();
        let kk = g.cin * self.kernel() * self.kernel();
        let p = g.ho * g.wo;
        let mut y = Tensor::zeros(&[n, cout, g.ho, g.wo]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        for b in 0..n {
            let src: &[T] = if self.is_pointwise() {
                x.item(b)
            } else {
                self.im2col(&g, x.item(b), &mut cols);
                &cols
            };
            let out = y.item_mut(b);
            gemm(cout, kk, p, self.weight.value.data(), false, src, false, out, T::zero());
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.data().iter().enumerate() {
                    out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }

    /// Accumulates kernel/bias gradients (unless frozen) and returns `dL/dx`.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let x = &cache.input;
        let g = self.geometry(x).expect("cache matches layer");
        let n = x.dims4().0;
        let cout = self.out_channels();
        let kk = g.cin * self.kernel() * self.kernel();
        let p = g.ho * g.wo;
        assert_eq!(dy.shape(), [n, cout, g.ho, g.wo], "conv backward gradient shape");
        let pointwise = self.is_pointwise();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); kk * p];
        let mut dcols = vec![T::zero(); kk * p];
        let train = !self.weight.frozen;
        for b in 0..n {
            let dyb = dy.item(b);
            if train {
                let src: &[T] = if pointwise {
                    x.item(b)
                } else {
                    self.im2col(&g, x.item(b), &mut cols);
                    &cols
                };
                gemm(cout, p, kk, dyb, false, src, true, self.weight.grad.data_mut(), T::one());
                if let Some(bias) = &mut self.bias {
                    for (o, gb) in bias.grad.data_mut().iter_mut().enumerate() {
                        *gb += dyb[o * p..(o + 1) * p].iter().copied().sum::<T>();
                    }
                }
            }
            if pointwise {
                gemm(kk, cout, p, self.weight.value.data(), true, dyb, false, dx.item_mut(b), T::zero());
            } else {
                gemm(kk, cout, p, self.weight.value.data(), true, dyb, false, &mut dcols, T::zero());
                self.col2im(&g, &dcols, dx.item_mut(b));
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
