use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(leaf, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub elements: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + h) - f(x - h)) / 2h`, element by element over every
/// leaf.
///
/// `f` receives a fresh graph and one [`Var`] per leaf (in order) and must
/// return a scalar.
pub fn grad_check<F>(f: F, leaves: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        elements: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.numel() {
            let x = leaf.data()[e];
            probe[li].data_mut()[e] = x + h;
            let plus = eval(&probe)?;
            probe[li].data_mut()[e] = x - h;
            let minus = eval(&probe)?;
            probe[li].data_mut()[e] = x;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[li].data()[e];
            let err = relative_error(a, numeric);
            report.elements += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((li, e, a, numeric));
            }
        }
    }
    Ok(report)
}
