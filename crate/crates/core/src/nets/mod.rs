//! Layer building blocks shared by both generators and discriminators.
//!
//! Every layer exposes an explicit `forward` that returns its output together
//! with a cache, and a `backward` that consumes that cache, accumulates
//! parameter gradients and returns the gradient with respect to the input.

mod activation;
mod block;
mod conv;
mod init;
mod norm;
mod pool;
mod residual;
mod resize;
mod sine;

use std::collections::BTreeMap;

pub use block::{ConvBlock, ConvBlockCache};
pub use activation::{leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, LEAKY_SLOPE};
pub use conv::{Conv2d, ConvCache, Padding};
pub use init::{siren_bound, siren_init, uniform_fan_in};
pub use norm::{BatchNorm2d, BnCache, BnMode};
pub use pool::{global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward, PoolCache};
pub use residual::{Arrangement, BlockCache, ResidualBlock};
pub use resize::{Resize, ResizeCache};
pub use sine::{SineCache, SineLayer};

use crate::tensor::{Real, Tensor};

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters receive no gradient.
    pub frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named parameter tree snapshot: dotted path to tensor value.
pub type ParamTree<T> = BTreeMap<String, Tensor<T>>;

/// Anything that owns learnable parameters (and optionally non-learnable
/// buffers such as batch-norm running statistics).
pub trait Module<T: Real> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}

    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_params_mut("", &mut |_, p| p.frozen = frozen);
    }

    fn param_tree(&self) -> ParamTree<T> {
        let mut tree = ParamTree::new();
        self.visit_params("", &mut |name, p| {
            tree.insert(name.to_string(), p.value.clone());
        });
        tree
    }

    fn grad_tree(&self) -> ParamTree<T> {
        let mut tree = ParamTree::new();
        self.visit_params("", &mut |name, p| {
            tree.insert(name.to_string(), p.grad.clone());
        });
        tree
    }
}

/// Total element count of every learnable tensor in a parameter tree.
pub fn count_parameters<T: Real>(params: &ParamTree<T>) -> usize {
    params.values().map(Tensor::numel).sum()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_buffers(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_buffers_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_tree_has_no_parameters() {
        assert_eq!(count_parameters::<f32>(&ParamTree::new()), 0);
    }

    #[test]
    fn conv3x3_64_to_64_with_bias_counts_36928() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new(64, 64, 3, 1, 1, Padding::Zero, true, &mut rng);
        assert_eq!(count_parameters(&conv.param_tree()), 64 * 64 * 9 + 64);
        assert_eq!(conv.num_parameters(), 36_928);
    }
}
