use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let c = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(c).data(), g.value(b).data());

    let a = g.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let ones = g.constant(t64(&[2, 1], &[1., 1.]));
    let c = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(c).data(), naive_matmul(&[1., 2., 3., 4.], &[1., 1.], 2, 2, 1));
    assert_eq!(g.value(c).data(), &[3., 7.]);

    let z = g.constant(Tensor::zeros([2, 2]));
    let c = g.matmul(z, b).unwrap();
    assert!(g.value(c).data().iter().all(|&x| x == 0.0));

    assert!(matches!(g.matmul(b, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 8)] {
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let expect = naive_matmul(a.data(), b.data(), m, k, n);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // a · (bᵀ)ᵀ through the transposed path
        let bt: Vec<f64> = (0..n).flat_map(|j| (0..k).map(move |p| (p, j))).map(|(p, j)| b.data()[p * n + j]).collect();
        let vbt = g.constant(Tensor::new([n, k], bt).unwrap());
        let c2 = g.matmul_nt(va, vbt).unwrap();
        assert!(g.value(c2).max_abs_diff(g.value(c)) < 1e-12);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2], &[2., 3.]));
    let y = g.constant(t64(&[2], &[4., 5.]));
    let zero = g.constant(Tensor::zeros([2]));
    let s = g.add(x, zero).unwrap();
    assert_eq!(g.value(s).data(), &[2., 3.]);
    let p = g.mul(x, y).unwrap();
    assert_eq!(g.value(p).data(), &[8., 15.]);
    let d = g.sub(y, x).unwrap();
    assert_eq!(g.value(d).data(), &[2., 2.]);
    let k = g.scale(x, 0.5).unwrap();
    assert_eq!(g.value(k).data(), &[1., 1.5]);

    let a = g.constant(t64(&[2], &[1., 2.]));
    let b = g.constant(t64(&[1], &[3.]));
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2., 3.]);

    // row-vector broadcast over a matrix
    let m = g.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let r = g.add(m, x).unwrap();
    assert_eq!(g.value(r).data(), &[3., 5., 5., 7.]);

    let bad = g.constant(Tensor::zeros([3]));
    assert!(g.add(x, bad).is_err());
    let bad = g.constant(Tensor::zeros([3, 1]));
    assert!(g.concat(&[m, bad]).is_err());
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1], &[0.]));
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).item(), 0.5);

    let one = g.constant(t64(&[1], &[1.]));
    let ge = g.gelu(one).unwrap();
    let oracle = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
    assert!((g.value(ge).item() - oracle).abs() < 1e-15);
    assert!((g.value(ge).item() - 0.84134).abs() < 1e-5);

    for c in [-1e3, 0.0, 7.5, 1e3] {
        let v = g.constant(t64(&[3], &[c, c, c]));
        let sm = g.softmax(v).unwrap();
        for &p in g.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    // stable for large magnitudes
    let big = g.constant(t64(&[2], &[-800., 800.]));
    let sg = g.sigmoid(big).unwrap();
    assert_eq!(g.value(sg).data(), &[0.0, 1.0]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::ones([3]));
    let bias = g.constant(Tensor::zeros([3]));

    let c = g.constant(t64(&[1, 3], &[4., 4., 4.]));
    let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let eps = 1e-5;
    let x = g.constant(t64(&[1, 3], &[1., 2., 3.]));
    let y = g.layer_norm(x, gain, bias, eps).unwrap();
    // mean 2, biased variance 2/3
    let s = 1.0 / (2.0f64 / 3.0 + eps).sqrt();
    let expect = [-s, 0.0, s];
    for (a, b) in g.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((s - 1.5f64.sqrt()).abs() < 1e-4);

    let unit = [-1.224744871391589, 0.0, 1.224744871391589];
    let x = g.constant(t64(&[1, 3], &unit));
    let y = g.layer_norm(x, gain, bias, eps).unwrap();
    for (a, b) in g.value(y).data().iter().zip(unit) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn dropout_behaviour() {
    let mut g = Graph::<f64>::new();
    let n = 100_000;
    let x = g.constant(Tensor::ones([n]));
    assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, false, 1).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, 1).is_err());
    assert!(g.dropout(x, -0.1, true, 1).is_err());

    let a = g.dropout(x, 0.5, true, 9).unwrap();
    let b = g.dropout(x, 0.5, true, 9).unwrap();
    assert!(g.value(a).bit_eq(g.value(b)));
    let vals = g.value(a).data();
    let mean = vals.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(t64(&[1, 2], &[1., 0.]));
    let ce = g.cross_entropy(l, &[0]).unwrap();
    let e = 1f64.exp();
    let oracle = -(e / (e + 1.0)).ln();
    assert!((g.value(ce).item() - oracle).abs() < 1e-12);
    assert!((g.value(ce).item() - 0.3133).abs() < 1e-4);

    let v = 7;
    let u = g.constant(Tensor::full([3, v], 0.25));
    let ce = g.cross_entropy(u, &[0, 3, 6]).unwrap();
    assert!((g.value(ce).item() - (v as f64).ln()).abs() < 1e-12);

    let sharp = g.constant(t64(&[1, 2], &[60., 0.]));
    let ce = g.cross_entropy(sharp, &[0]).unwrap();
    assert!(g.value(ce).item() < 1e-20);

    assert!(matches!(g.cross_entropy(l, &[2]), Err(Error::IndexOutOfRange { .. })));
    assert!(g.cross_entropy(l, &[0, 1]).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[3], &[1., -2., 0.5]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., -4., 1.]);

    // accumulation
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4., -8., 2.]);
    g.zero_grads();
    assert!(g.grad(x).is_none());

    assert!(matches!(g.backward(sq), Err(Error::NotScalar(_))));

    // constant output: f(x) = 0·Σx
    let z = g.scale(x, 0.0).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn sum_of_product_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let r = grad_check(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            g.sum(c)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 3]);
    let w = random(&mut rng, &[2, 3]);
    let r = grad_check(
        |g, v| {
            let wc = g.constant(w.clone());
            let y = g.linear(v[0], wc, None)?;
            let s = g.scale(y, 3.0)?;
            g.sum(s)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-9, "{r:?}");
}

struct WrongSquare;

impl CustomOp<f64> for WrongSquare {
    fn name(&self) -> &'static str {
        "wrong_square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad_output: &Tensor<f64>,
    ) -> Result<Vec<Option<Tensor<f64>>>> {
        // should be 2x
        let d = inputs[0].data().iter().zip(grad_output.data()).map(|(x, g)| 1.9 * x * g).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
    }
}

#[test]
fn checker_detects_corrupted_rule() {
    let r = grad_check(
        |g, v| {
            let y = g.custom(&[v[0]], WrongSquare)?;
            g.sum(y)
        },
        &[t64(&[3], &[0.5, -1.0, 2.0])],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err >= 1e-2, "{r:?}");
}

#[test]
fn custom_gradient_shape_is_validated() {
    struct BadShape;
    impl CustomOp<f64> for BadShape {
        fn name(&self) -> &'static str {
            "bad_shape"
        }
        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].clone())
        }
        fn backward(
            &self,
            _: &[&Tensor<f64>],
            _: &Tensor<f64>,
            _: &Tensor<f64>,
        ) -> Result<Vec<Option<Tensor<f64>>>> {
            Ok(vec![Some(Tensor::zeros([7]))])
        }
    }
    let mut g = Graph::new();
    let x = g.param(t64(&[2], &[1., 2.]));
    let y = g.custom(&[x], BadShape).unwrap();
    let s = g.sum(y).unwrap();
    assert!(g.backward(s).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1], &[f64::MAX]));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn replay_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut g = Graph::<f32>::new();
    let x = g.param(random(&mut rng, &[5, 6]).cast());
    let w = g.param(random(&mut rng, &[4, 6]).cast());
    let b = g.param(random(&mut rng, &[4]).cast());
    let gain = g.param(Tensor::ones([4]));
    let beta = g.param(Tensor::zeros([4]));
    let h = g.linear(x, w, Some(b)).unwrap();
    let h = g.gelu(h).unwrap();
    let h = g.layer_norm(h, gain, beta, 1e-5).unwrap();
    let h = g.dropout(h, 0.3, true, 4).unwrap();
    let s = g.softmax(h).unwrap();
    let loss = g.cross_entropy(s, &[0, 1, 2, 3, 0]).unwrap();
    assert_eq!(g.replay_mismatch().unwrap(), None);
    g.backward(loss).unwrap();
    assert_eq!(g.replay_mismatch().unwrap(), None);
}

/// A random composite exercising every primitive, reduced to a scalar.
fn composite(g: &mut Graph<f64>, v: &[Var], targets: &[usize], dropout_seed: u64) -> Result<Var> {
    let (x, w, b, w2, gain, beta, table, w3) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
    let h = g.linear(x, w, Some(b))?;
    let a = g.gelu(h)?;
    let s = g.sigmoid(h)?;
    let m = g.mul(a, s)?;
    let d = g.sub(m, h)?;
    let n = g.layer_norm(d, gain, beta, 1e-5)?;
    let n = g.dropout(n, 0.25, true, dropout_seed)?;
    let c = g.concat(&[n, x])?;
    let p = g.matmul_nt(c, w2)?;
    let e = g.embedding(table, targets)?;
    let p = g.add(p, e)?;
    let sm = g.softmax(p)?;
    let sm = g.scale(sm, 2.0)?;
    let q = g.matmul(sm, w3)?;
    let ce = g.cross_entropy(p, targets)?;
    let qs = g.sum(q)?;
    let qs = g.scale(qs, 0.1)?;
    g.add(ce, qs)
}

proptest! {
    #![proptest_config(crate::testutil::proptest_config(120))]

    #[test]
    fn random_composites_pass_gradcheck(
        rows in 1usize..5,
        din in 1usize..5,
        dout in 3usize..6,
        vocab in 2usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = vec![
            random(&mut rng, &[rows, din]),
            random(&mut rng, &[dout, din]),
            random(&mut rng, &[dout]),
            random(&mut rng, &[vocab, dout + din]),
            random(&mut rng, &[dout]),
            random(&mut rng, &[dout]),
            random(&mut rng, &[vocab, vocab]),
            random(&mut rng, &[vocab, 2]),
        ];
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
        let r = grad_check(|g, v| composite(g, v, &targets, seed), &leaves, 1e-5).unwrap();
        prop_assert!(r.max_rel_err <= 1e-5, "{:?}", r);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shift(
        rows in 1usize..6,
        cols in 1usize..9,
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]).data().iter().map(|v| v * 20.0).collect::<Vec<_>>();
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new([rows, cols], x).unwrap());
        let b = g.constant(Tensor::new([rows, cols], shifted).unwrap());
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(sa).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) <= 1e-9);
    }

    #[test]
    fn layer_norm_rows_are_standardized(
        rows in 1usize..5,
        cols in 2usize..33,
        scale in 0.5f64..20.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = random(&mut rng, &[rows, cols]).data().iter().map(|v| v * scale + 3.0).collect();
        for r in x.chunks(cols) {
            let m = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assume!(var > 0.1);
        }
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new([rows, cols], x).unwrap());
        let gain = g.constant(Tensor::ones([cols]));
        let bias = g.constant(Tensor::zeros([cols]));
        let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var - 1.0).abs() <= 1e-4, "var {}", var);
        }
    }

    #[test]
    fn inference_dropout_is_identity(p in 0.0f64..0.99, seed in any::<u64>()) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([17], 1.5f32));
        let y = g.dropout(x, p, false, seed).unwrap();
        prop_assert_eq!(x, y);
    }
}
