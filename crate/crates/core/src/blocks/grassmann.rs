use super::{post_norm_tail, Pairing, Pass};
use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{normalize_backward, normalize_in_place, plucker_dim, wedge_backward, wedge_into};
use crate::params::{impl_params, FeedForwardParams, Initializer, LinearParams, NormParams};
use crate::tensor::{Element, Tensor};

/// Learned arrays of one Grassmann mixing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GrassmannBlockParams<P> {
    /// `[r x d]`, `[r]`
    pub reduce: LinearParams<P>,
    /// `[d x C(r,2)]`, `[d]`
    pub plucker: LinearParams<P>,
    /// `[d x 2d]`, `[d]`
    pub gate: LinearParams<P>,
    pub ffn: FeedForwardParams<P>,
    pub norm1: NormParams<P>,
    pub norm2: NormParams<P>,
}

impl_params!(GrassmannBlockParams {
    node reduce: "reduce",
    node plucker: "plucker",
    node gate: "gate",
    node ffn: "ffn",
    node norm1: "norm1",
    node norm2: "norm2",
});

impl<T: Element> GrassmannBlockParams<Tensor<T>> {
    pub fn init(init: &mut Initializer, d: usize, r: usize, d_ff: usize) -> Self {
        GrassmannBlockParams {
            reduce: init.linear(r, d),
            plucker: init.linear(d, plucker_dim(r)),
            gate: init.linear(d, 2 * d),
            ffn: init.feed_forward(d, d_ff),
            norm1: init.norm(d),
            norm2: init.norm(d),
        }
    }
}

/// How positions are paired and normalized inside one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSettings<'a> {
    pub offsets: &'a [usize],
    pub pairing: Pairing,
    pub eps: f64,
}

/// Rows of the pair `(first, second)` whose span is assigned to row `t`.
#[inline]
fn pair_rows(pairing: Pairing, base: usize, t: usize, s: usize) -> (usize, usize) {
    match pairing {
        Pairing::Backward => (base + s, base + t),
        Pairing::Forward => (base + t, base + s),
    }
}

/// For every row of `z` (`[n x r]`, sequences of `seq_len` rows), writes the
/// mean over valid offsets of the normalized Plücker vector of its pair into
/// `pbar` (`[n x C(r,2)]`) and the number of valid offsets into `counts`.
/// Rows without a valid offset are left at zero.
pub(crate) fn pair_average<T: Element>(
    z: &[T],
    r: usize,
    seq_len: usize,
    mix: &MixSettings<'_>,
    pbar: &mut [T],
    counts: &mut [usize],
) {
    let c = plucker_dim(r);
    let eps = T::lit(mix.eps);
    let mut p = vec![T::zero(); c];
    let rows = z.len() / r;
    for base in (0..rows).step_by(seq_len) {
        for t in 0..seq_len {
            let out = &mut pbar[(base + t) * c..(base + t + 1) * c];
            out.iter_mut().for_each(|v| *v = T::zero());
            let mut n = 0;
            for &d in mix.offsets {
                let Some(s) = mix.pairing.partner(t, d, seq_len) else { continue };
                let (a, b) = pair_rows(mix.pairing, base, t, s);
                wedge_into(&z[a * r..(a + 1) * r], &z[b * r..(b + 1) * r], &mut p);
                normalize_in_place(&mut p, eps);
                for (o, v) in out.iter_mut().zip(&p) {
                    *o = *o + *v;
                }
                n += 1;
            }
            if n > 1 {
                let inv = T::one() / T::lit(n as f64);
                out.iter_mut().for_each(|v| *v = *v * inv);
            }
            counts[base + t] = n;
        }
    }
}

/// Pullback of [`pair_average`]: accumulates into `dz`.
fn pair_average_backward<T: Element>(
    z: &[T],
    r: usize,
    seq_len: usize,
    mix: &MixSettings<'_>,
    dpbar: &[T],
    dz: &mut [T],
) {
    let c = plucker_dim(r);
    let eps = T::lit(mix.eps);
    let mut p = vec![T::zero(); c];
    let mut dp_hat = vec![T::zero(); c];
    let mut dp = vec![T::zero(); c];
    let rows = z.len() / r;
    for base in (0..rows).step_by(seq_len) {
        for t in 0..seq_len {
            let valid: Vec<usize> = mix
                .offsets
                .iter()
                .filter_map(|&d| mix.pairing.partner(t, d, seq_len))
                .collect();
            if valid.is_empty() {
                continue;
            }
            let inv = T::one() / T::lit(valid.len() as f64);
            for (o, g) in dp_hat.iter_mut().zip(&dpbar[(base + t) * c..(base + t + 1) * c]) {
                *o = *g * inv;
            }
            for s in valid {
                let (a, b) = pair_rows(mix.pairing, base, t, s);
                let (za, zb) = (&z[a * r..(a + 1) * r], &z[b * r..(b + 1) * r]);
                wedge_into(za, zb, &mut p);
                let norm = normalize_in_place(&mut p, eps);
                dp.iter_mut().for_each(|v| *v = T::zero());
                normalize_backward(&p, norm, eps, &dp_hat, &mut dp);
                let (mut da, mut db) = (vec![T::zero(); r], vec![T::zero(); r]);
                wedge_backward(za, zb, &dp, &mut da, &mut db);
                for (o, v) in dz[a * r..(a + 1) * r].iter_mut().zip(&da) {
                    *o = *o + *v;
                }
                for (o, v) in dz[b * r..(b + 1) * r].iter_mut().zip(&db) {
                    *o = *o + *v;
                }
            }
        }
    }
}

/// `G = P̄ Wᵀ + b` on rows with at least one valid offset, zero elsewhere.
/// Equal to averaging the per-offset projections `W p̂ + b`.
pub(crate) fn project_features<T: Element>(
    pbar: &[T],
    counts: &[usize],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (d, rows) = (bias.len(), counts.len());
    let c = weight.len() / d;
    T::gemm(rows, c, d, T::one(), pbar, c, 1, weight, 1, c, T::zero(), out, d, 1);
    for (row, &n) in out.chunks_mut(d).zip(counts) {
        if n > 0 {
            for (o, b) in row.iter_mut().zip(bias) {
                *o = *o + *b;
            }
        }
    }
}

/// Fused pairs → Plücker → normalize → aggregate → project.
struct PluckerFeatures {
    seq_len: usize,
    offsets: Vec<usize>,
    pairing: Pairing,
    eps: f64,
}

impl PluckerFeatures {
    fn mix(&self) -> MixSettings<'_> {
        MixSettings {
            offsets: &self.offsets,
            pairing: self.pairing,
            eps: self.eps,
        }
    }

    fn averaged<T: Element>(&self, z: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
        let r = z.cols();
        let rows = z.rows();
        let mut pbar = vec![T::zero(); rows * plucker_dim(r)];
        let mut counts = vec![0; rows];
        pair_average(z.data(), r, self.seq_len, &self.mix(), &mut pbar, &mut counts);
        (pbar, counts)
    }
}

impl<T: Element> CustomOp<T> for PluckerFeatures {
    fn name(&self) -> &'static str {
        "grassmann_features"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (z, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (pbar, counts) = self.averaged(z);
        let mut out = vec![T::zero(); z.rows() * b.numel()];
        project_features(&pbar, &counts, w.data(), b.data(), &mut out);
        Tensor::new([z.rows(), b.numel()], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (z, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (rows, r, d) = (z.rows(), z.cols(), b.numel());
        let c = plucker_dim(r);
        let (pbar, counts) = self.averaged(z);
        let dg = grad_output.data();

        let mut dw = vec![T::zero(); d * c];
        T::gemm(d, rows, c, T::one(), dg, 1, d, &pbar, c, 1, T::zero(), &mut dw, c, 1);

        let mut db = vec![T::zero(); d];
        for (row, &n) in dg.chunks(d).zip(&counts) {
            if n > 0 {
                for (o, v) in db.iter_mut().zip(row) {
                    *o = *o + *v;
                }
            }
        }

        let mut dpbar = vec![T::zero(); rows * c];
        T::gemm(rows, d, c, T::one(), dg, d, 1, w.data(), c, 1, T::zero(), &mut dpbar, c, 1);
        let mut dz = vec![T::zero(); z.numel()];
        pair_average_backward(z.data(), r, self.seq_len, &self.mix(), &dpbar, &mut dz);

        Ok(vec![
            Some(Tensor::new(z.shape().to_vec(), dz)?),
            Some(Tensor::new(w.shape().to_vec(), dw)?),
            Some(Tensor::new(b.shape().to_vec(), db)?),
        ])
    }
}

/// `Z = H W_redᵀ + b_red`.
pub fn reduce_states<T: Element>(g: &mut Graph<T>, h: Var, p: &LinearParams<Var>) -> Result<Var> {
    g.linear(h, p.weight, Some(p.bias))
}

/// Mean over valid offsets of `W_plü p̂ + b_plü`, zero on rows with no valid
/// offset. `z` is `[n x r]` holding sequences of `seq_len` rows.
pub fn grassmann_features<T: Element>(
    g: &mut Graph<T>,
    z: Var,
    proj: &LinearParams<Var>,
    seq_len: usize,
    mix: &MixSettings<'_>,
) -> Result<Var> {
    let (zs, ws, bs) = (
        g.value(z).shape().to_vec(),
        g.value(proj.weight).shape().to_vec(),
        g.value(proj.bias).shape().to_vec(),
    );
    if zs.len() != 2 || zs[1] < 2 {
        return Err(Error::shape("grassmann_features", format!("reduced states {zs:?}")));
    }
    if ws != [bs[0], plucker_dim(zs[1])] || bs.len() != 1 {
        return Err(Error::shape(
            "grassmann_features",
            format!("projection {ws:?} + {bs:?} for r = {}", zs[1]),
        ));
    }
    if seq_len == 0 || zs[0] % seq_len != 0 {
        return Err(Error::shape(
            "grassmann_features",
            format!("{} rows do not split into sequences of length {seq_len}", zs[0]),
        ));
    }
    if mix.offsets.contains(&0) || !(mix.eps > 0.0) {
        return Err(Error::invalid("offsets must be >= 1 and eps positive"));
    }
    g.custom(
        &[z, proj.weight, proj.bias],
        PluckerFeatures {
            seq_len,
            offsets: mix.offsets.to_vec(),
            pairing: mix.pairing,
            eps: mix.eps,
        },
    )
}

/// `α ⊙ H + (1 - α) ⊙ G` with `α = sigmoid(W_gate [H; G] + b_gate)`.
pub fn gated_fusion<T: Element>(g: &mut Graph<T>, h: Var, feats: Var, gate: &LinearParams<Var>) -> Result<Var> {
    if g.value(h).shape() != g.value(feats).shape() {
        return Err(Error::shape(
            "gated_fusion",
            format!("{:?} vs {:?}", g.value(h).shape(), g.value(feats).shape()),
        ));
    }
    let u = g.concat(&[h, feats])?;
    let a = g.linear(u, gate.weight, Some(gate.bias))?;
    let alpha = g.sigmoid(a)?;
    let diff = g.sub(h, feats)?;
    let mixed = g.mul(alpha, diff)?;
    g.add(feats, mixed)
}

/// One Grassmann layer on `[n x d]` hidden states.
pub fn grassmann_block_forward<T: Element>(
    g: &mut Graph<T>,
    h: Var,
    p: &GrassmannBlockParams<Var>,
    mix: &MixSettings<'_>,
    pass: &Pass,
) -> Result<Var> {
    pass.check_rows("grassmann_block", g.value(h).rows())?;
    let z = reduce_states(g, h, &p.reduce)?;
    let feats = grassmann_features(g, z, &p.plucker, pass.seq_len, mix)?;
    let fused = gated_fusion(g, h, feats, &p.gate)?;
    post_norm_tail(g, fused, &p.norm1, &p.ffn, &p.norm2, pass)
}
