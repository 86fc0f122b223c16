use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Pointwise binary operations. The right operand may be broadcast when its
/// shape is a suffix of the left operand's shape (bias-style).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    /// Exact form `0.5 x (1 + erf(x / sqrt 2))`.
    Gelu,
    /// Softmax over the last axis.
    Softmax,
}

impl Activation {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
            Activation::Softmax => "softmax",
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn normal_cdf<T: Element>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn normal_pdf<T: Element>(x: T) -> T {
    let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (T::lit(-0.5) * x * x).exp()
}

/// Row-wise softmax in place, stabilized by max subtraction.
/// Neumaier-compensated sum.
pub(crate) fn compensated_sum<T: Element>(xs: &[T]) -> T {
    let (mut sum, mut comp) = (T::zero(), T::zero());
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp = comp + ((sum - t) + x);
        } else {
            comp = comp + ((x - t) + sum);
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn softmax_rows<T: Element>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Sums `g` (shaped like the broadcast output) back down to `len` elements.
fn reduce_broadcast<T: Element>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o = *o + *v;
        }
    }
    out
}

impl<T: Element> Graph<T> {
    fn shape_of(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape_of(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.matrix_dims(a, "matmul")?;
        let (k2, _) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} and {k2}")));
        }
        self.push(Op::MatMul { a, b, transpose_b: false })
    }

    /// `a [m x k] * b^T` with `b [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.matrix_dims(a, "matmul_nt")?;
        let (_, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner extents {k} and {k2}")));
        }
        self.push(Op::MatMul { a, b, transpose_b: true })
    }

    /// Affine map over the last axis: `x w^T + b` with `w [out x in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out, inp) = self.matrix_dims(w, "linear")?;
        let cols = *self.shape_of(x).last().expect("non-empty shape");
        if cols != inp {
            return Err(Error::shape(
                "linear",
                format!("input width {cols} vs weight {:?}", self.shape_of(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape_of(b) != [out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {out} outputs", self.shape_of(b)),
                ));
            }
        }
        self.push(Op::Linear { x, w, b })
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        if !broadcast_ok(self.shape_of(a), self.shape_of(b)) {
            return Err(Error::shape(
                kind.name(),
                format!("{:?} and {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        self.push(Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.push(Op::Scale { a, factor })
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = &self.shape_of(*first)[..self.shape_of(*first).len() - 1];
        for p in parts {
            let s = self.shape_of(*p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs leading {lead:?}"),
                ));
            }
        }
        self.push(Op::Concat {
            parts: parts.to_vec(),
        })
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        self.push(Op::Activation { kind, a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Gelu, a)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.activation(Activation::Softmax, a)
    }

    /// Normalizes each row over the last axis to zero mean and unit (biased)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = *self.shape_of(x).last().expect("non-empty shape");
        if self.shape_of(gain) != [d] || self.shape_of(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.shape_of(gain),
                    self.shape_of(bias)
                ),
            ));
        }
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    /// Inverted dropout. Returns `x` itself when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::lit(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        self.push(Op::Dropout { a: x, mask })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if rows != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: bad,
                bound: vocab,
            });
        }
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, _) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&t| t >= rows) {
            return Err(Error::IndexOutOfRange {
                what: "embedding table",
                index: bad,
                bound: rows,
            });
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup of zero ids"));
        }
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum { a })
    }

    pub(super) fn eval(&self, op: &Op<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let val = |v: &Var| self.value(*v);
        let out = match op {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::MatMul { a, b, transpose_b } => {
                let (a, b) = (val(a), val(b));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let (n, rsb, csb) = if *transpose_b {
                    (b.shape()[0], 1, k)
                } else {
                    (b.shape()[1], b.shape()[1], 1)
                };
                let mut c = vec![T::zero(); m * n];
                T::gemm(m, k, n, T::one(), a.data(), k, 1, b.data(), rsb, csb, T::zero(), &mut c, n, 1);
                Tensor::new([m, n], c)?
            }
            Op::Linear { x, w, b } => {
                let (x, w) = (val(x), val(w));
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                let rows = x.rows();
                let mut y = vec![T::zero(); rows * out];
                T::gemm(rows, inp, out, T::one(), x.data(), inp, 1, w.data(), 1, inp, T::zero(), &mut y, out, 1);
                if let Some(b) = b {
                    let b = val(b).data();
                    for row in y.chunks_mut(out) {
                        for (y, b) in row.iter_mut().zip(b) {
                            *y = *y + *b;
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = out;
                Tensor::new(shape, y)?
            }
            Op::Binary { kind, a, b } => {
                let (a, b) = (val(a), val(b));
                let bd = b.data();
                let bn = bd.len();
                let f: fn(T, T) -> T = match kind {
                    BinaryOp::Add => |x, y| x + y,
                    BinaryOp::Sub => |x, y| x - y,
                    BinaryOp::Mul => |x, y| x * y,
                };
                let data = a
                    .data()
                    .chunks(bn)
                    .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| f(*x, *y)))
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale { a, factor } => {
                let a = val(a);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| *v * *factor).collect())?
            }
            Op::Concat { parts } => {
                let tensors: Vec<_> = parts.iter().map(val).collect();
                let rows = tensors[0].rows();
                let width: usize = tensors.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for t in &tensors {
                        data.extend_from_slice(t.row(r));
                    }
                }
                let mut shape = tensors[0].shape().to_vec();
                *shape.last_mut().unwrap() = width;
                Tensor::new(shape, data)?
            }
            Op::Activation { kind, a } => {
                let a = val(a);
                let shape = a.shape().to_vec();
                match kind {
                    Activation::Sigmoid => {
                        Tensor::new(shape, a.data().iter().map(|&x| sigmoid(x)).collect())?
                    }
                    Activation::Gelu => {
                        let cdf: Vec<T> = a.data().iter().map(|&x| normal_cdf(x)).collect();
                        let y = a.data().iter().zip(&cdf).map(|(x, c)| *x * *c).collect();
                        return Ok((Tensor::new(shape, y)?, cdf));
                    }
                    Activation::Softmax => {
                        let mut data = a.data().to_vec();
                        softmax_rows(&mut data, a.cols());
                        Tensor::new(shape, data)?
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, g, b) = (val(x), val(gain).data(), val(bias).data());
                let d = x.cols();
                let n = T::from_usize(d).unwrap();
                let mut y = Vec::with_capacity(x.numel());
                let mut stats = Vec::with_capacity(2 * x.rows());
                for row in x.data().chunks(d) {
                    let mean = compensated_sum(row) / n;
                    let dev: Vec<T> = row.iter().map(|v| (*v - mean) * (*v - mean)).collect();
                    let var = compensated_sum(&dev) / n;
                    let rstd = T::one() / (var + *eps).sqrt();
                    stats.push(mean);
                    stats.push(rstd);
                    for j in 0..d {
                        y.push((row[j] - mean) * rstd * g[j] + b[j]);
                    }
                }
                return Ok((Tensor::new(x.shape().to_vec(), y)?, stats));
            }
            Op::Dropout { a, mask } => {
                let a = val(a);
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().zip(mask).map(|(x, m)| *x * *m).collect(),
                )?
            }
            Op::CrossEntropy { logits, targets } => {
                let l = val(logits);
                let v = l.cols();
                let mut lse_rows = Vec::with_capacity(targets.len());
                let mut total = 0.0f64;
                for (row, &t) in l.data().chunks(v).zip(targets) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = max + row.iter().map(|x| (*x - max).exp()).sum::<T>().ln();
                    lse_rows.push(lse);
                    total += (lse - row[t]).to_f64().unwrap();
                }
                let mean = total / targets.len() as f64;
                return Ok((Tensor::scalar(T::lit(mean)), lse_rows));
            }
            Op::Embedding { table, ids } => {
                let t = val(table);
                let d = t.cols();
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    data.extend_from_slice(t.row(i));
                }
                Tensor::new([ids.len(), d], data)?
            }
            Op::Sum { a } => Tensor::scalar(compensated_sum(val(a).data())),
            Op::Custom { inputs, op } => {
                let ins: Vec<_> = inputs.iter().map(val).collect();
                op.forward(&ins)?
            }
        };
        Ok((out, Vec::new()))
    }

    /// Vector-Jacobian product of node `i` for upstream gradient `g`.
    pub(super) fn vjp(&self, i: usize, g: Vec<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let val = |v: &Var| self.value(*v);
        let wants = |v: &Var| self.requires_grad(*v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    if *transpose_b {
                        T::gemm(m, n, k, T::one(), &g, n, 1, bv.data(), k, 1, T::zero(), &mut da, k, 1);
                    } else {
                        T::gemm(m, n, k, T::one(), &g, n, 1, bv.data(), 1, n, T::zero(), &mut da, k, 1);
                    }
                    out.push((*a, da));
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    if *transpose_b {
                        T::gemm(n, m, k, T::one(), &g, 1, n, av.data(), k, 1, T::zero(), &mut db, k, 1);
                    } else {
                        T::gemm(k, m, n, T::one(), av.data(), 1, k, &g, n, 1, T::zero(), &mut db, n, 1);
                    }
                    out.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (o, inp) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if wants(x) {
                    let mut dx = vec![T::zero(); rows * inp];
                    T::gemm(rows, o, inp, T::one(), &g, o, 1, wv.data(), inp, 1, T::zero(), &mut dx, inp, 1);
                    out.push((*x, dx));
                }
                if wants(w) {
                    let mut dw = vec![T::zero(); o * inp];
                    T::gemm(o, rows, inp, T::one(), &g, 1, o, xv.data(), inp, 1, T::zero(), &mut dw, inp, 1);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| wants(b)) {
                    out.push((b, reduce_broadcast(&g, o)));
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(a), val(b));
                let bn = bv.numel();
                match kind {
                    BinaryOp::Add | BinaryOp::Sub => {
                        if wants(b) {
                            let mut db = reduce_broadcast(&g, bn);
                            if *kind == BinaryOp::Sub {
                                db.iter_mut().for_each(|v| *v = -*v);
                            }
                            out.push((*b, db));
                        }
                        if wants(a) {
                            out.push((*a, g));
                        }
                    }
                    BinaryOp::Mul => {
                        if wants(a) {
                            let da = g
                                .chunks(bn)
                                .flat_map(|c| c.iter().zip(bv.data()).map(|(g, b)| *g * *b))
                                .collect();
                            out.push((*a, da));
                        }
                        if wants(b) {
                            let prod: Vec<T> = g.iter().zip(av.data()).map(|(g, a)| *g * *a).collect();
                            out.push((*b, reduce_broadcast(&prod, bn)));
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(a) {
                    out.push((*a, g.iter().map(|v| *v * *factor).collect()));
                }
            }
            Op::Concat { parts } => {
                let width = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let dp = g
                            .chunks(width)
                            .flat_map(|row| row[offset..offset + c].iter().copied())
                            .collect();
                        out.push((*p, dp));
                    }
                    offset += c;
                }
            }
            Op::Activation { kind, a } => {
                if wants(a) {
                    let y = node.value.data();
                    let da = match kind {
                        Activation::Sigmoid => g
                            .iter()
                            .zip(y)
                            .map(|(g, y)| *g * *y * (T::one() - *y))
                            .collect(),
                        Activation::Gelu => g
                            .iter()
                            .zip(val(a).data())
                            .zip(&node.aux)
                            .map(|((g, x), cdf)| *g * (*cdf + *x * normal_pdf(*x)))
                            .collect(),
                        Activation::Softmax => {
                            let cols = node.value.cols();
                            let mut da = Vec::with_capacity(g.len());
                            for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                                let dot: T = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                                da.extend(gr.iter().zip(yr).map(|(g, y)| *y * (*g - dot)));
                            }
                            da
                        }
                    };
                    out.push((*a, da));
                }
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let xv = val(x);
                let gv = val(gain).data();
                let d = xv.cols();
                let n = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                for (r, (row, grow)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, rstd) = (node.aux[2 * r], node.aux[2 * r + 1]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] = dgain[j] + grow[j] * xhat[j];
                        dbias[j] = dbias[j] + grow[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                    }
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxr[j] = rstd / n * (n * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if wants(x) {
                    out.push((*x, dx));
                }
                if wants(gain) {
                    out.push((*gain, dgain));
                }
                if wants(bias) {
                    out.push((*bias, dbias));
                }
            }
            Op::Dropout { a, mask } => {
                if wants(a) {
                    out.push((*a, g.iter().zip(mask).map(|(g, m)| *g * *m).collect()));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if wants(logits) {
                    let l = val(logits);
                    let v = l.cols();
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    let mut dl = Vec::with_capacity(l.numel());
                    for (r, (row, &t)) in l.data().chunks(v).zip(targets).enumerate() {
                        let lse = node.aux[r];
                        for (j, x) in row.iter().enumerate() {
                            let p = (*x - lse).exp();
                            let hot = if j == t { T::one() } else { T::zero() };
                            dl.push(scale * (p - hot));
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::Embedding { table, ids } => {
                if wants(table) {
                    let t = val(table);
                    let d = t.cols();
                    let mut dt = vec![T::zero(); t.numel()];
                    for (grow, &id) in g.chunks(d).zip(ids) {
                        for (o, v) in dt[id * d..(id + 1) * d].iter_mut().zip(grow) {
                            *o = *o + *v;
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::Sum { a } => {
                if wants(a) {
                    out.push((*a, vec![g[0]; val(a).numel()]));
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<_> = inputs.iter().map(val).collect();
                let grad_out = Tensor::new(node.value.shape().to_vec(), g)?;
                let grads = op.backward(&ins, &node.value, &grad_out)?;
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for ((v, t), grad) in inputs.iter().zip(&ins).zip(grads) {
                    if let Some(grad) = grad.filter(|_| wants(v)) {
                        if grad.shape() != t.shape() {
                            return Err(Error::shape(
                                op.name(),
                                format!("gradient {:?} for input {:?}", grad.shape(), t.shape()),
                            ));
                        }
                        out.push((*v, grad.into_data()));
                    }
                }
            }
        }
        Ok(out)
    }
}
