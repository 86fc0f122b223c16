use super::{post_norm_tail, Pass};
use crate::autodiff::{ops::softmax_rows, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{impl_params, FeedForwardParams, Initializer, LinearParams, NormParams};
use crate::tensor::{Element, Tensor};

/// Learned arrays of one causal self-attention layer.
///
/// The per-head projections are stored side by side: columns
/// `h*d_h..(h+1)*d_h` of the query output belong to head `h`. Keys have no
/// bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams<P> {
    pub query: LinearParams<P>,
    /// `[d x d]`
    pub key: P,
    pub value: LinearParams<P>,
    pub output: LinearParams<P>,
    pub ffn: FeedForwardParams<P>,
    pub norm1: NormParams<P>,
    pub norm2: NormParams<P>,
}

impl_params!(AttentionBlockParams {
    node query: "query",
    leaf key: "key.weight",
    node value: "value",
    node output: "output",
    node ffn: "ffn",
    node norm1: "norm1",
    node norm2: "norm2",
});

impl<T: Element> AttentionBlockParams<Tensor<T>> {
    pub fn init(init: &mut Initializer, d: usize, d_ff: usize) -> Self {
        AttentionBlockParams {
            query: init.linear(d, d),
            key: init.weight(&[d, d]),
            value: init.linear(d, d),
            output: init.linear(d, d),
            ffn: init.feed_forward(d, d_ff),
            norm1: init.norm(d),
            norm2: init.norm(d),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    seq_len: usize,
    heads: usize,
    d: usize,
}

impl Layout {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn scale<T: Element>(&self) -> T {
        T::one() / T::lit(self.head_dim() as f64).sqrt()
    }

    /// Offset of the `(sequence, head)` block inside an `[n x d]` buffer.
    fn offset(&self, seq: usize, head: usize) -> usize {
        seq * self.seq_len * self.d + head * self.head_dim()
    }

    /// Masked softmax of `Q_h K_hᵀ / sqrt(d_h)` into `a` (`[L x L]`).
    fn probs<T: Element>(&self, q: &[T], k: &[T], seq: usize, head: usize, a: &mut [T]) {
        let (l, d, off) = (self.seq_len, self.d, self.offset(seq, head));
        T::gemm(
            l,
            self.head_dim(),
            l,
            self.scale(),
            &q[off..],
            d,
            1,
            &k[off..],
            1,
            d,
            T::zero(),
            a,
            l,
            1,
        );
        for i in 0..l {
            let row = &mut a[i * l..(i + 1) * l];
            softmax_rows(&mut row[..=i], i + 1);
            row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Multi-head scaled dot-product attention with future positions masked.
struct CausalAttention {
    layout: Layout,
}

impl<T: Element> CustomOp<T> for CausalAttention {
    fn name(&self) -> &'static str {
        "causal_attention"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let ly = self.layout;
        let (l, d, dh) = (ly.seq_len, ly.d, ly.head_dim());
        let mut out = vec![T::zero(); q.len()];
        let mut a = vec![T::zero(); l * l];
        for seq in 0..q.len() / (l * d) {
            for head in 0..ly.heads {
                ly.probs(q, k, seq, head, &mut a);
                let off = ly.offset(seq, head);
                T::gemm(l, l, dh, T::one(), &a, l, 1, &v[off..], d, 1, T::zero(), &mut out[off..], d, 1);
            }
        }
        Tensor::new(inputs[0].shape().to_vec(), out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let dout = grad_output.data();
        let ly = self.layout;
        let (l, d, dh) = (ly.seq_len, ly.d, ly.head_dim());
        let scale: T = ly.scale();
        let (mut dq, mut dk, mut dv) = (vec![T::zero(); q.len()], vec![T::zero(); k.len()], vec![T::zero(); v.len()]);
        let mut a = vec![T::zero(); l * l];
        let mut ds = vec![T::zero(); l * l];
        for seq in 0..q.len() / (l * d) {
            for head in 0..ly.heads {
                let off = ly.offset(seq, head);
                ly.probs(q, k, seq, head, &mut a);
                // dV = Aᵀ dO
                T::gemm(l, l, dh, T::one(), &a, 1, l, &dout[off..], d, 1, T::zero(), &mut dv[off..], d, 1);
                // dA = dO Vᵀ
                T::gemm(l, dh, l, T::one(), &dout[off..], d, 1, &v[off..], 1, d, T::zero(), &mut ds, l, 1);
                for i in 0..l {
                    let (ar, dr) = (&a[i * l..(i + 1) * l], &mut ds[i * l..(i + 1) * l]);
                    let dot: T = ar[..=i].iter().zip(&dr[..=i]).map(|(x, y)| *x * *y).sum();
                    for j in 0..l {
                        dr[j] = if j <= i { ar[j] * (dr[j] - dot) } else { T::zero() };
                    }
                }
                T::gemm(l, l, dh, scale, &ds, l, 1, &k[off..], d, 1, T::zero(), &mut dq[off..], d, 1);
                T::gemm(l, l, dh, scale, &ds, 1, l, &q[off..], d, 1, T::zero(), &mut dk[off..], d, 1);
            }
        }
        let shape = inputs[0].shape().to_vec();
        Ok(vec![
            Some(Tensor::new(shape.clone(), dq)?),
            Some(Tensor::new(shape.clone(), dk)?),
            Some(Tensor::new(shape, dv)?),
        ])
    }
}

fn layout(op: &'static str, shape: &[usize], heads: usize, seq_len: usize) -> Result<Layout> {
    if shape.len() != 2 {
        return Err(Error::shape(op, format!("expected [n x d], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(op, format!("model dim {d} is not divisible by {heads} heads")));
    }
    if seq_len == 0 || n % seq_len != 0 {
        return Err(Error::shape(op, format!("{n} rows do not split into sequences of length {seq_len}")));
    }
    Ok(Layout { seq_len, heads, d })
}

/// Attention probabilities, one `[L x L]` matrix per `(sequence, head)` in
/// sequence-major order.
pub fn attention_weights<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
    seq_len: usize,
) -> Result<Vec<Tensor<T>>> {
    let ly = layout("attention_weights", q.shape(), heads, seq_len)?;
    if q.shape() != k.shape() {
        return Err(Error::shape("attention_weights", format!("{:?} vs {:?}", q.shape(), k.shape())));
    }
    let mut out = Vec::new();
    for seq in 0..q.rows() / seq_len {
        for head in 0..heads {
            let mut a = vec![T::zero(); seq_len * seq_len];
            ly.probs(q.data(), k.data(), seq, head, &mut a);
            out.push(Tensor::new([seq_len, seq_len], a)?);
        }
    }
    Ok(out)
}

/// Concatenated head outputs `softmax(mask(Q_h K_hᵀ / sqrt(d_h))) V_h`.
pub fn causal_attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seq_len: usize,
) -> Result<Var> {
    let shape = g.value(q).shape().to_vec();
    let ly = layout("causal_attention", &shape, heads, seq_len)?;
    if g.value(k).shape() != shape.as_slice() || g.value(v).shape() != shape.as_slice() {
        return Err(Error::shape("causal_attention", "query, key and value shapes differ"));
    }
    g.custom(&[q, k, v], CausalAttention { layout: ly })
}

/// One attention layer on `[n x d]` hidden states: `mixed = H + W_o MHA(H)`.
pub fn attention_block_forward<T: Element>(
    g: &mut Graph<T>,
    h: Var,
    p: &AttentionBlockParams<Var>,
    heads: usize,
    pass: &Pass,
) -> Result<Var> {
    pass.check_rows("attention_block", g.value(h).rows())?;
    let q = g.linear(h, p.query.weight, Some(p.query.bias))?;
    let k = g.linear(h, p.key, None)?;
    let v = g.linear(h, p.value.weight, Some(p.value.bias))?;
    let o = causal_attention(g, q, k, v, heads, pass.seq_len)?;
    let o = g.linear(o, p.output.weight, Some(p.output.bias))?;
    let mixed = g.add(h, o)?;
    post_norm_tail(g, mixed, &p.norm1, &p.ffn, &p.norm2, pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::{bind, Params};
    use crate::testutil::{self, assert_close, uniform};

    fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, l: usize) -> Vec<f64> {
        let d = q.cols();
        let dh = d / heads;
        let mut out = vec![0.0; q.numel()];
        for base in (0..q.rows()).step_by(l) {
            for h in 0..heads {
                for i in 0..l {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..dh).map(|c| q.row(base + i)[h * dh + c] * k.row(base + j)[h * dh + c]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let a = (s - m).exp() / z;
                        for c in 0..dh {
                            out[(base + i) * d + h * dh + c] += a * v.row(base + j)[h * dh + c];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn weights_are_causal_distributions() {
        let (l, d, heads) = (9, 8, 4);
        let q = uniform(1, &[2 * l, d], 2.0);
        let k = uniform(2, &[2 * l, d], 2.0);
        let all = attention_weights(&q, &k, heads, l).unwrap();
        assert_eq!(all.len(), 2 * heads);
        for a in &all {
            for i in 0..l {
                let row = a.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                assert!(row[..=i].iter().all(|&v| v > 0.0));
            }
        }

        let single = attention_weights(&uniform(3, &[1, d], 1.0), &uniform(4, &[1, d], 1.0), heads, 1).unwrap();
        assert!(single.iter().all(|a| a.data() == [1.0]));

        assert!(attention_weights(&uniform(3, &[4, 6], 1.0), &uniform(4, &[4, 6], 1.0), 4, 4).is_err());
    }

    #[test]
    fn output_matches_naive_oracle() {
        let (l, d, heads) = (7, 8, 4);
        let (q, k, v) = (uniform(5, &[3 * l, d], 1.5), uniform(6, &[3 * l, d], 1.5), uniform(7, &[3 * l, d], 1.0));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = causal_attention(&mut g, qv, kv, vv, heads, l).unwrap();
        assert_close(g.value(o).data(), &naive_attention(&q, &k, &v, heads, l), 1e-12);

        let bad = g.constant(uniform(8, &[3 * l, 6], 1.0));
        assert!(causal_attention(&mut g, qv, kv, bad, heads, l).is_err());
        assert!(causal_attention(&mut g, qv, kv, vv, 3, l).is_err());
        assert!(causal_attention(&mut g, qv, kv, vv, heads, 5).is_err());
    }

    #[test]
    fn attention_gradcheck() {
        let (l, d, heads) = (5, 8, 2);
        let leaves = [uniform(9, &[2 * l, d], 1.0), uniform(10, &[2 * l, d], 1.0), uniform(11, &[2 * l, d], 1.0)];
        let w = uniform(12, &[2 * l, d], 1.0);
        let report = grad_check(
            |g, v| {
                let o = causal_attention(g, v[0], v[1], v[2], heads, l)?;
                let wv = g.constant(w.clone());
                let y = g.mul(o, wv)?;
                g.sum(y)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    fn block(seed: u64, d: usize) -> AttentionBlockParams<Tensor<f64>> {
        let mut p = AttentionBlockParams::init(&mut Initializer::new(seed, 0.3), d, 4 * d);
        let mut k = 0;
        p.visit_mut("", &mut |name, t| {
            k += 1;
            if !name.ends_with("weight") {
                let noise = uniform(seed ^ k, t.shape(), 0.3);
                t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
            }
        });
        p
    }

    #[test]
    fn block_gradcheck() {
        let (l, d) = (6, 8);
        let params = block(13, d);
        let w = uniform(14, &[l, d], 1.0);
        let mut leaves = vec![uniform(15, &[l, d], 1.0)];
        leaves.extend(testutil::leaves(&params));
        let report = grad_check(
            |g, v| {
                let p = testutil::rebind(&params, &v[1..]);
                let o = attention_block_forward(g, v[0], &p, 4, &Pass::inference(l))?;
                let wv = g.constant(w.clone());
                let y = g.mul(o, wv)?;
                g.sum(y)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    fn run(params: &AttentionBlockParams<Tensor<f64>>, h: &Tensor<f64>, l: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let p = bind(&mut g, params);
        let o = attention_block_forward(&mut g, hv, &p, 4, &Pass::inference(l)).unwrap();
        g.value(o).clone()
    }

    #[test]
    fn block_is_causal() {
        let (l, d) = (10, 8);
        let params = block(16, d);
        let h = uniform(17, &[l, d], 1.0);
        let base = run(&params, &h, l);
        assert_eq!(base.shape(), &[l, d]);
        for s in 0..l {
            let mut hp = h.clone();
            hp.data_mut()[s * d..(s + 1) * d].iter_mut().for_each(|v| *v = -*v);
            let out = run(&params, &hp, l);
            for t in 0..s {
                assert_eq!(out.row(t), base.row(t));
            }
            assert_ne!(out.row(s), base.row(s));
        }
    }
}
