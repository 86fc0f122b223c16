//! Plücker coordinates for 2-planes in `R^r`, i.e. points of Gr(2, r).
//!
//! A plane spanned by `u` and `v` is encoded by all 2x2 minors
//! `p_ij = u_i v_j - u_j v_i` for `1 <= i < j <= r`, laid out in
//! lexicographic `(i, j)` order. That layout is part of the checkpoint
//! format and must not change.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Floor applied to the Plücker norm before normalizing.
pub const DEFAULT_PLUCKER_EPS: f64 = 1e-6;

/// Number of Plücker coordinates for planes in `R^r`: `C(r, 2)`.
pub fn plucker_dim(r: usize) -> usize {
    r * r.saturating_sub(1) / 2
}

/// Flat position of the 1-based pair `(i, j)` in lexicographic order.
pub fn pair_index(i: usize, j: usize, r: usize) -> Result<usize> {
    if !(1 <= i && i < j && j <= r) {
        return Err(Error::invalid(format!(
            "pair ({i}, {j}) must satisfy 1 <= i < j <= {r}"
        )));
    }
    Ok((i - 1) * (2 * r - i) / 2 + (j - i - 1))
}

/// Inverse of [`pair_index`].
pub fn index_pair(k: usize, r: usize) -> Result<(usize, usize)> {
    let mut k_left = k;
    for i in 1..r {
        let row = r - i;
        if k_left < row {
            return Ok((i, i + 1 + k_left));
        }
        k_left -= row;
    }
    Err(Error::IndexOutOfRange {
        what: "Plücker coordinates",
        index: k,
        bound: plucker_dim(r),
    })
}

/// Coordinates of a (possibly non-decomposable) element of `Λ² R^r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerVector<T> {
    r: usize,
    coords: Vec<T>,
}

impl<T: Element> PluckerVector<T> {
    pub fn new(r: usize, coords: Vec<T>) -> Result<Self> {
        if r < 2 || coords.len() != plucker_dim(r) {
            return Err(Error::shape(
                "plucker",
                format!("{} coordinates for r = {r}", coords.len()),
            ));
        }
        Ok(PluckerVector { r, coords })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    /// Coordinate `p_ij` for 1-based `i < j`.
    pub fn get(&self, i: usize, j: usize) -> Result<T> {
        Ok(self.coords[pair_index(i, j, self.r)?])
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.coords)
    }
}

pub(crate) fn l2_norm<T: Element>(x: &[T]) -> T {
    x.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

/// Writes `u ∧ v` into `out` (length `C(r, 2)`).
pub(crate) fn wedge_into<T: Element>(u: &[T], v: &[T], out: &mut [T]) {
    let r = u.len();
    let mut k = 0;
    for i in 0..r {
        let (ui, vi) = (u[i], v[i]);
        for j in i + 1..r {
            out[k] = ui * v[j] - u[j] * vi;
            k += 1;
        }
    }
}

/// Accumulates the pullback of `dp` through `u ∧ v` into `du`, `dv`.
pub(crate) fn wedge_backward<T: Element>(u: &[T], v: &[T], dp: &[T], du: &mut [T], dv: &mut [T]) {
    let r = u.len();
    let mut k = 0;
    for i in 0..r {
        for j in i + 1..r {
            let g = dp[k];
            du[i] = du[i] + g * v[j];
            du[j] = du[j] - g * v[i];
            dv[j] = dv[j] + g * u[i];
            dv[i] = dv[i] - g * u[j];
            k += 1;
        }
    }
}

/// Scales `p` by `1 / max(|p|, eps)` in place and returns the pre-scaling norm.
pub(crate) fn normalize_in_place<T: Element>(p: &mut [T], eps: T) -> T {
    let norm = l2_norm(p);
    let denom = norm.max(eps);
    for v in p.iter_mut() {
        *v = *v / denom;
    }
    norm
}

/// Pullback through [`normalize_in_place`]. `p_hat` is the normalized vector
/// and `norm` the norm before scaling. At `norm == eps` the norm branch is
/// used.
pub(crate) fn normalize_backward<T: Element>(p_hat: &[T], norm: T, eps: T, dp_hat: &[T], dp: &mut [T]) {
    if norm >= eps {
        let dot: T = p_hat.iter().zip(dp_hat).map(|(a, b)| *a * *b).sum();
        for ((o, ph), g) in dp.iter_mut().zip(p_hat).zip(dp_hat) {
            *o = *o + (*g - *ph * dot) / norm;
        }
    } else {
        for (o, g) in dp.iter_mut().zip(dp_hat) {
            *o = *o + *g / eps;
        }
    }
}

/// Plücker coordinates of the plane spanned by `u` and `v`.
pub fn plucker_embed<T: Element>(u: &[T], v: &[T]) -> Result<PluckerVector<T>> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "plucker_embed",
            format!("vectors of length {} and {}", u.len(), v.len()),
        ));
    }
    if u.len() < 2 {
        return Err(Error::invalid("plucker_embed needs r >= 2"));
    }
    let mut coords = vec![T::zero(); plucker_dim(u.len())];
    wedge_into(u, v, &mut coords);
    PluckerVector::new(u.len(), coords)
}

/// `p / max(|p|_2, eps)`.
pub fn plucker_normalize<T: Element>(p: &PluckerVector<T>, eps: T) -> Result<PluckerVector<T>> {
    if !(eps > T::zero()) {
        return Err(Error::invalid(format!("normalization floor {eps} must be positive")));
    }
    let mut coords = p.coords.clone();
    normalize_in_place(&mut coords, eps);
    PluckerVector::new(p.r, coords)
}

/// The single quadratic Plücker relation of Gr(2, 4):
/// `p12 p34 - p13 p24 + p14 p23`, zero exactly on decomposable vectors.
pub fn plucker_relation_residual<T: Element>(p: &PluckerVector<T>) -> Result<T> {
    if p.r != 4 {
        return Err(Error::invalid(format!(
            "relation residual is defined for r = 4, got r = {}",
            p.r
        )));
    }
    let c = &p.coords;
    Ok(c[0] * c[5] - c[1] * c[4] + c[2] * c[3])
}

/// Row-wise `u ∧ v` on the autodiff graph.
struct WedgeOp;

impl<T: Element> CustomOp<T> for WedgeOp {
    fn name(&self) -> &'static str {
        "plucker_embed"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (u, v) = (inputs[0], inputs[1]);
        let r = u.cols();
        let c = plucker_dim(r);
        let mut out = vec![T::zero(); u.rows() * c];
        for ((ur, vr), o) in u.data().chunks(r).zip(v.data().chunks(r)).zip(out.chunks_mut(c)) {
            wedge_into(ur, vr, o);
        }
        let mut shape = u.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        Tensor::new(shape, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (u, v) = (inputs[0], inputs[1]);
        let r = u.cols();
        let c = plucker_dim(r);
        let mut du = vec![T::zero(); u.numel()];
        let mut dv = vec![T::zero(); v.numel()];
        for (row, dp) in grad_output.data().chunks(c).enumerate() {
            let span = row * r..(row + 1) * r;
            wedge_backward(
                &u.data()[span.clone()],
                &v.data()[span.clone()],
                dp,
                &mut du[span.clone()],
                &mut dv[span],
            );
        }
        Ok(vec![
            Some(Tensor::new(u.shape().to_vec(), du)?),
            Some(Tensor::new(v.shape().to_vec(), dv)?),
        ])
    }
}

struct NormalizeOp<T> {
    eps: T,
}

impl<T: Element> CustomOp<T> for NormalizeOp<T> {
    fn name(&self) -> &'static str {
        "plucker_normalize"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let p = inputs[0];
        let mut out = p.data().to_vec();
        for row in out.chunks_mut(p.cols()) {
            normalize_in_place(row, self.eps);
        }
        Tensor::new(p.shape().to_vec(), out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let p = inputs[0];
        let c = p.cols();
        let mut dp = vec![T::zero(); p.numel()];
        for (((prow, phat), g), o) in p
            .data()
            .chunks(c)
            .zip(output.data().chunks(c))
            .zip(grad_output.data().chunks(c))
            .zip(dp.chunks_mut(c))
        {
            normalize_backward(phat, l2_norm(prow), self.eps, g, o);
        }
        Ok(vec![Some(Tensor::new(p.shape().to_vec(), dp)?)])
    }
}

impl<T: Element> Graph<T> {
    /// Row-wise Plücker embedding: `[.., r] x [.., r] -> [.., C(r, 2)]`.
    pub fn plucker_embed(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.value(u).shape(), self.value(v).shape());
        if su != sv {
            return Err(Error::shape("plucker_embed", format!("{su:?} vs {sv:?}")));
        }
        if self.value(u).cols() < 2 {
            return Err(Error::invalid("plucker_embed needs r >= 2"));
        }
        self.custom(&[u, v], WedgeOp)
    }

    /// Row-wise `p / max(|p|, eps)`.
    pub fn plucker_normalize(&mut self, p: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("normalization floor must be positive"));
        }
        self.custom(&[p], NormalizeOp { eps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn pair_index_enumeration() {
        // oracle: enumerate pairs lexicographically
        let r = 4;
        let mut k = 0;
        for i in 1..=r {
            for j in i + 1..=r {
                assert_eq!(pair_index(i, j, r).unwrap(), k);
                assert_eq!(index_pair(k, r).unwrap(), (i, j));
                k += 1;
            }
        }
        assert_eq!(pair_index(1, 2, 4).unwrap(), 0);
        assert_eq!(pair_index(3, 4, 4).unwrap(), 5);
        assert_eq!(pair_index(2, 3, 4).unwrap(), 3);
        assert!(pair_index(2, 2, 4).is_err());
        assert!(pair_index(3, 2, 4).is_err());
        assert!(pair_index(0, 2, 4).is_err());
        assert!(pair_index(1, 5, 4).is_err());
        assert!(index_pair(6, 4).is_err());
    }

    #[test]
    fn embed_examples() {
        let p = plucker_embed(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(p.coords(), &[1.0]);

        let e1 = [1.0, 0.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(plucker_embed(&e1, &e2).unwrap().coords(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let p = plucker_embed(&[1.0, 2.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.coords(), &[1.0, 1.0, 1.0, 2.0, 1.0, -1.0]);
        assert_eq!(p.get(2, 3).unwrap(), 2.0);
        assert_eq!(plucker_relation_residual(&p).unwrap(), 0.0);

        let u = [0.3, -1.2, 2.5];
        let twice: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        assert!(plucker_embed(&u, &twice).unwrap().coords().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn embed_errors() {
        assert!(plucker_embed(&[1.0], &[2.0]).is_err());
        assert!(plucker_embed(&[1.0, 2.0], &[2.0]).is_err());
        let p = PluckerVector::new(3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(plucker_relation_residual(&p).is_err());
    }

    #[test]
    fn normalize_branches() {
        let zero = PluckerVector::new(3, vec![0.0; 3]).unwrap();
        assert_eq!(plucker_normalize(&zero, 1e-6).unwrap().coords(), &[0.0; 3]);

        let p = PluckerVector::new(3, vec![3.0, 0.0, 4.0]).unwrap();
        let n = plucker_normalize(&p, 1e-6).unwrap();
        assert_eq!(n.coords(), &[0.6, 0.0, 0.8]);

        let tiny = PluckerVector::new(3, vec![0.6e-8f64, 0.0, 0.8e-8]).unwrap();
        let n = plucker_normalize(&tiny, 1e-6).unwrap();
        assert!((n.norm() - 0.01).abs() < 1e-15);
        assert!((n.coords()[0] - 0.6e-8 / 1e-6).abs() < 1e-15);

        assert!(plucker_normalize(&p, 0.0).is_err());
    }

    #[test]
    fn residual_of_non_decomposable() {
        let p = PluckerVector::new(4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(plucker_relation_residual(&p).unwrap(), 1.0);
    }

    #[test]
    fn graph_ops_pass_gradcheck() {
        let u = Tensor::from_f64([3, 5], &(0..15).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let v = Tensor::from_f64([3, 5], &(0..15).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>()).unwrap();
        let w = Tensor::from_f64([3, 10], &(0..30).map(|i| (i as f64 * 0.13).sin()).collect::<Vec<_>>()).unwrap();
        let report = grad_check(
            |g, x| {
                let p = g.plucker_embed(x[0], x[1])?;
                let n = g.plucker_normalize(p, 1e-6)?;
                let weighted = g.mul(n, x[2])?;
                g.sum(weighted)
            },
            &[u, v, w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn normalize_gradient_below_floor() {
        // |p| < eps: plain scaling by 1/eps
        let p = Tensor::from_f64([1, 3], &[1e-8, -2e-8, 3e-8]).unwrap();
        let w = Tensor::from_f64([1, 3], &[0.5, 1.5, -1.0]).unwrap();
        let mut g = Graph::new();
        let pv = g.param(p);
        let wv = g.constant(w);
        let n = g.plucker_normalize(pv, 1e-6).unwrap();
        let m = g.mul(n, wv).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(pv).unwrap().data();
        assert_eq!(grad, &[0.5 / 1e-6, 1.5 / 1e-6, -1.0 / 1e-6]);
    }
}
