//! Named parameter collections.
//!
//! Every learned array lives in a struct generic over its storage `P`:
//! `Tensor<T>` when owned by a model, [`Var`](crate::Var) once bound to a
//! graph for a forward pass. Traversal order is the canonical parameter
//! order used by checkpoints and the optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::tensor::{Element, Tensor};

pub trait Params<P> {
    type Mapped<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P));

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q>;

    /// `(name, value)` pairs in canonical order.
    fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p)));
        out
    }
}

pub(crate) fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Binds owned tensors to a graph as differentiable leaves.
pub fn bind<T: Element, S: Params<Tensor<T>>>(g: &mut Graph<T>, params: &S) -> S::Mapped<Var> {
    params.map(&mut |t| g.param(t.clone()))
}

/// Total element count of a tensor collection.
pub fn numel<T: Element, S: Params<Tensor<T>>>(params: &S) -> usize {
    let mut n = 0;
    params.visit("", &mut |_, t| n += t.numel());
    n
}

macro_rules! impl_params {
    ($name:ident { $($kind:ident $field:ident : $key:literal),* $(,)? }) => {
        impl<P> $crate::params::Params<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $( impl_params!(@visit $kind, &self.$field, prefix, $key, f); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
                $( impl_params!(@visit_mut $kind, &mut self.$field, prefix, $key, f); )*
            }

            fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name { $( $field: impl_params!(@map $kind, &self.$field, f) ),* }
            }
        }
    };
    (@visit leaf, $e:expr, $prefix:ident, $key:literal, $f:ident) => {
        $f($crate::params::join($prefix, $key), $e)
    };
    (@visit node, $e:expr, $prefix:ident, $key:literal, $f:ident) => {
        $crate::params::Params::visit($e, &$crate::params::join($prefix, $key), $f)
    };
    (@visit_mut leaf, $e:expr, $prefix:ident, $key:literal, $f:ident) => {
        $f($crate::params::join($prefix, $key), $e)
    };
    (@visit_mut node, $e:expr, $prefix:ident, $key:literal, $f:ident) => {
        $crate::params::Params::visit_mut($e, &$crate::params::join($prefix, $key), $f)
    };
    (@map leaf, $e:expr, $f:ident) => { $f($e) };
    (@map node, $e:expr, $f:ident) => { $crate::params::Params::map($e, $f) };
}
pub(crate) use impl_params;

/// Weight `[out x in]` and bias `[out]` of an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<P> {
    pub weight: P,
    pub bias: P,
}

impl_params!(LinearParams { leaf weight: "weight", leaf bias: "bias" });

/// Gain and bias of a layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<P> {
    pub gain: P,
    pub bias: P,
}

impl_params!(NormParams { leaf gain: "gain", leaf bias: "bias" });

/// Position-wise two-layer network `W2 gelu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams<P> {
    pub up: LinearParams<P>,
    pub down: LinearParams<P>,
}

impl_params!(FeedForwardParams { node up: "up", node down: "down" });

/// Seeded source of initial parameter values: weights `N(0, std)`, biases
/// zero, normalization gains one.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("finite non-negative std"),
        }
    }

    pub fn weight<T: Element>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.normal.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    pub fn linear<T: Element>(&mut self, out: usize, inp: usize) -> LinearParams<Tensor<T>> {
        LinearParams {
            weight: self.weight(&[out, inp]),
            bias: Tensor::zeros([out]),
        }
    }

    pub fn norm<T: Element>(&mut self, d: usize) -> NormParams<Tensor<T>> {
        NormParams {
            gain: Tensor::ones([d]),
            bias: Tensor::zeros([d]),
        }
    }

    pub fn feed_forward<T: Element>(&mut self, d: usize, d_ff: usize) -> FeedForwardParams<Tensor<T>> {
        FeedForwardParams {
            up: self.linear(d_ff, d),
            down: self.linear(d, d_ff),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_names() {
        let ffn = FeedForwardParams {
            up: LinearParams { weight: 1, bias: 2 },
            down: LinearParams { weight: 3, bias: 4 },
        };
        let names: Vec<_> = ffn.named().into_iter().map(|(n, v)| format!("{n}={v}")).collect();
        assert_eq!(names, ["up.weight=1", "up.bias=2", "down.weight=3", "down.bias=4"]);
        let doubled = ffn.map(&mut |v| v * 2);
        assert_eq!(doubled.down.bias, 8);
    }
}
