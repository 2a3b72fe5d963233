use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean over the spatial axes: `[n, c, h, w] -> [n, c, 1, 1]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let p = h * w;
    let inv = T::one() / T::lit(p as f64);
    let data = x.data().chunks(p).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c, 1, 1], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let p = input_shape[2] * input_shape[3];
    let inv = T::one() / T::lit(p as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(p).zip(dy.data()) {
        plane.fill(g * inv);
    }
    dx
}

pub struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (n, c, h, w) = x.try_dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("max pooling needs at least 2x2, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                y.data_mut()[(plane * ho + oy) * wo + ox] = x.data()[best];
                argmax.push(best);
            }
        }
    }
    Ok((
        y,
        PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn max_pool2_backward<T: Real>(cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&cache.input_shape);
    for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}
