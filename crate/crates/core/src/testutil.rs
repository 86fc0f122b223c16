//! Reference implementations and fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::params::Params;
use crate::tensor::{Element, Tensor};

pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x6772_6173),
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn uniform(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Leaves of a parameter collection in canonical order.
pub fn leaves<T: Element, S: Params<Tensor<T>>>(p: &S) -> Vec<Tensor<T>> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Rebuilds a `Var` collection from leaves bound in canonical order.
pub fn rebind<T: Element, S: Params<Tensor<T>>>(p: &S, vars: &[Var]) -> S::Mapped<Var> {
    let mut it = vars.iter().copied();
    p.map(&mut |_| it.next().expect("enough vars"))
}

/// Row-major `[m x k] · [k x n]` by triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// `x Wᵀ + b` with `W` stored `[out x in]`.
pub fn linear(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / inp;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b.data()[o];
            for i in 0..inp {
                s += x[r * inp + i] * w.data()[o * inp + i];
            }
            y[r * out + o] = s;
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        y.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * rstd * gain[i] + bias[i]));
    }
    y
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}
