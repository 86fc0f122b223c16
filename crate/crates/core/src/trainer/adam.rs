use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let beta = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.eps > 0.0 && beta(self.beta1) && beta(self.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global L2 norm of the gradients as passed in.
    pub grad_norm: f64,
    /// Global norm after clipping.
    pub clipped_norm: f64,
    /// Number of parameter elements that were stepped.
    pub updated: usize,
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Element>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norms before and after.
pub fn clip_global_norm<T: Element>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm <= max_norm {
        return (norm, norm);
    }
    let scale = T::lit(max_norm / norm);
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
    }
    (norm, global_norm(grads))
}

/// Adam with bias correction. Moments are kept in double precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads` given in canonical parameter
    /// order. Parameters whose gradient is `None` are left untouched.
    pub fn step<T: Element, S: Params<Tensor<T>>>(
        &mut self,
        params: &mut S,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<StepStats> {
        let mut tensors: Vec<&mut Tensor<T>> = Vec::new();
        params.visit_mut("", &mut |_, t| tensors.push(t));
        if tensors.len() != grads.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), tensors.len()),
            ));
        }
        for (i, (p, g)) in tensors.iter().zip(grads.iter()).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "adam",
                        format!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                    ));
                }
                g.ensure_finite("adam gradient")?;
            }
        }
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.iter().zip(&tensors).any(|(m, t)| m.len() != t.numel()) {
            return Err(Error::shape("adam", "parameter sizes changed between steps"));
        }

        let (grad_norm, clipped_norm) = match self.config.clip {
            Some(c) => clip_global_norm(grads, c),
            None => {
                let n = global_norm(grads);
                (n, n)
            }
        };

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let mut updated = 0;
        for (k, (p, g)) in tensors.into_iter().zip(grads.iter()).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.to_f64().unwrap_or(0.0);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w = T::lit(w.to_f64().unwrap_or(0.0) - update);
            }
            updated += g.numel();
        }
        Ok(StepStats {
            grad_norm,
            clipped_norm,
            updated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LinearParams;
    use crate::testutil::{proptest_config, uniform};
    use proptest::prelude::*;

    fn lin(w: &[f64], b: &[f64]) -> LinearParams<Tensor<f64>> {
        LinearParams {
            weight: Tensor::new([1, w.len()], w.to_vec()).unwrap(),
            bias: Tensor::new([b.len()], b.to_vec()).unwrap(),
        }
    }

    fn grads(p: &LinearParams<Tensor<f64>>, f: impl Fn(f64) -> f64) -> Vec<Option<Tensor<f64>>> {
        let mut out = Vec::new();
        p.visit("", &mut |_, t| {
            let data = t.data().iter().map(|&v| f(v)).collect();
            out.push(Some(Tensor::new(t.shape().to_vec(), data).unwrap()));
        });
        out
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = lin(&[0.5, -1.0, 2.0], &[3.0]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        for _ in 0..3 {
            let stats = opt.step(&mut p, &mut grads(&before, |_| 0.0)).unwrap();
            assert_eq!(stats.updated, 4);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = lin(&[0.5, -1.0, 2.0], &[3.0]);
        let cfg = AdamConfig { lr: 0.01, clip: None, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg).unwrap();
        let mut g = vec![
            Some(Tensor::new([1, 3], vec![0.3, -2.0, 5.0]).unwrap()),
            Some(Tensor::new([1], vec![-0.01]).unwrap()),
        ];
        opt.step(&mut p, &mut g).unwrap();
        // bias-corrected m/sqrt(v) = g/|g| on the first step
        let expect = [0.5 - 0.01, -1.0 + 0.01, 2.0 - 0.01, 3.0 + 0.01];
        let got: Vec<f64> = p.weight.data().iter().chain(p.bias.data()).copied().collect();
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut p = lin(&[1.0, -2.0, 0.5, 3.0], &[-1.5]);
        let norm = |p: &LinearParams<Tensor<f64>>| p.weight.data().iter().chain(p.bias.data()).map(|v| v * v).sum::<f64>().sqrt();
        let start = norm(&p);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, clip: None, ..AdamConfig::default() }).unwrap();
        for _ in 0..100 {
            let mut g = grads(&p, |w| 2.0 * w);
            opt.step(&mut p, &mut g).unwrap();
        }
        assert!(norm(&p) < 0.01 * start, "{} vs {start}", norm(&p));
    }

    #[test]
    fn step_errors() {
        let mut p = lin(&[1.0, 2.0], &[0.0]);
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        assert!(opt.step(&mut p, &mut [None]).is_err());
        let mut bad = vec![Some(Tensor::zeros([2])), None];
        assert!(opt.step(&mut p, &mut bad).is_err());
        let mut nan = vec![Some(Tensor::new([1, 2], vec![f64::NAN, 0.0]).unwrap()), None];
        assert!(matches!(opt.step(&mut p, &mut nan), Err(Error::NonFinite { .. })));
        let stats = opt.step(&mut p, &mut [None, Some(Tensor::ones([1]))]).unwrap();
        assert_eq!(stats.updated, 1);
        assert_eq!(p.weight.data(), &[1.0, 2.0]);
        assert!(Adam::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }).is_err());
        assert!(Adam::new(AdamConfig { clip: Some(0.0), ..AdamConfig::default() }).is_err());
    }

    proptest! {
        #![proptest_config(proptest_config(128))]

        #[test]
        fn clipping_bounds_the_norm(seed: u64, scale in 0.01f64..100.0, max in 0.1f64..5.0) {
            let mut g = vec![Some(uniform(seed, &[3, 4], scale)), None, Some(uniform(seed ^ 1, &[5], scale))];
            let before = global_norm(&g);
            let (pre, post) = clip_global_norm(&mut g, max);
            prop_assert_eq!(pre, before);
            if pre > max {
                prop_assert!(post <= max * (1.0 + 1e-12));
                prop_assert!((post - max).abs() <= 1e-9 * max);
            } else {
                prop_assert_eq!(post, pre);
            }
        }
    }
}
