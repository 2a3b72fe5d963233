use crate::tensor::{Real, Tensor};

/// Negative slope of every leaky rectifier in the discriminators.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Gradient of the leaky rectifier given its *output* (sign is preserved).
pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    y.zip_map(dy, |y, g| if y > T::zero() { g } else { g * s })
        .expect("leaky_relu_backward shape")
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradient of the logistic function given its output.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |y, g| g * y * (T::one() - y))
        .expect("sigmoid_backward shape")
}
