//! Self-checks runnable from the command line: Plücker geometry laws,
//! finite-difference gradients and causal masking.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, Var};
use crate::blocks::{
    attention_block_forward, causal_attention, gated_fusion, grassmann_block_forward, grassmann_features,
    AttentionBlockParams, GrassmannBlockParams, MixSettings, OffsetSet, Pairing, Pass, WindowSchedule,
    LAYER_NORM_EPS,
};
use crate::error::Result;
use crate::geometry::{plucker_dim, plucker_embed, plucker_normalize, plucker_relation_residual, DEFAULT_PLUCKER_EPS};
use crate::model::{BlockKind, LanguageModel, ModelConfig};
use crate::params::{Initializer, LinearParams, Params};
use crate::tensor::{Element, Tensor};

/// Result of one named property over many trials.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    /// Largest observed error, or a count of violations for boolean checks.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub outcomes: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} suite: {}", self.suite, if self.passed() { "PASS" } else { "FAIL" })?;
        for o in &self.outcomes {
            writeln!(
                f,
                "  {:<4} {:<40} trials={:<5} worst={:.3e} tol={:.1e}",
                if o.passed { "ok" } else { "FAIL" },
                o.name,
                o.trials,
                o.worst,
                o.tolerance
            )?;
        }
        Ok(())
    }
}

/// Accumulates the worst error of one property.
struct Tally {
    name: String,
    trials: usize,
    worst: f64,
    tolerance: f64,
}

impl Tally {
    fn new(name: &str, tolerance: f64) -> Self {
        Tally {
            name: name.to_string(),
            trials: 0,
            worst: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, err: f64) {
        self.trials += 1;
        if !(err <= self.worst) {
            self.worst = err;
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            passed: self.worst <= self.tolerance,
            name: self.name,
            trials: self.trials,
            worst: self.worst,
            tolerance: self.tolerance,
        }
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), uniform_vec(rng, shape.iter().product(), scale)).expect("shape matches")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sign(x: f64) -> f64 {
    if x < 0.0 { -1.0 } else { 1.0 }
}

/// Algebraic laws of the Plücker embedding, each over `trials` random draws
/// in double precision.
pub fn geometry_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut formula = Tally::new("coordinates equal u_i v_j - u_j v_i", 1e-15);
    let mut bilinear = Tally::new("bilinear in each argument", 1e-12);
    let mut antisym = Tally::new("antisymmetric", 0.0);
    let mut projective = Tally::new("normalized up to sign of scaling", 1e-12);
    let mut dependent = Tally::new("zero on dependent pairs", 1e-12);
    let mut independent = Tally::new("nonzero on independent pairs", 0.0);
    let mut relation = Tally::new("r = 4 quadratic relation residual", 1e-10);

    for _ in 0..trials {
        let r = rng.random_range(2..=9);
        let u = uniform_vec(&mut rng, r, 1.0);
        let v = uniform_vec(&mut rng, r, 1.0);
        let w = uniform_vec(&mut rng, r, 1.0);
        let p = plucker_embed(&u, &v)?;

        let mut by_hand = Vec::with_capacity(plucker_dim(r));
        for i in 0..r {
            for j in i + 1..r {
                by_hand.push(u[i] * v[j] - u[j] * v[i]);
            }
        }
        formula.record(max_abs_diff(p.coords(), &by_hand));

        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let comb: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let pw = plucker_embed(&w, &v)?;
        let lhs = plucker_embed(&comb, &v)?;
        let rhs: Vec<f64> = p.coords().iter().zip(pw.coords()).map(|(x, y)| a * x + b * y).collect();
        let comb2: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let right = plucker_embed(&u, &comb2)?;
        let puw = plucker_embed(&u, &w)?;
        let rhs2: Vec<f64> = p.coords().iter().zip(puw.coords()).map(|(x, y)| a * x + b * y).collect();
        bilinear.record(max_abs_diff(lhs.coords(), &rhs).max(max_abs_diff(right.coords(), &rhs2)));

        let q = plucker_embed(&v, &u)?;
        let neg: Vec<f64> = p.coords().iter().map(|x| -x).collect();
        antisym.record(max_abs_diff(q.coords(), &neg));

        let alpha = sign(rng.random_range(-1.0..1.0)) * rng.random_range(0.1..10.0);
        let beta = sign(rng.random_range(-1.0..1.0)) * rng.random_range(0.1..10.0);
        let su: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| beta * x).collect();
        let n1 = plucker_normalize(&plucker_embed(&su, &sv)?, DEFAULT_PLUCKER_EPS)?;
        let n0 = plucker_normalize(&p, DEFAULT_PLUCKER_EPS)?;
        let flipped: Vec<f64> = n0.coords().iter().map(|x| sign(alpha * beta) * x).collect();
        projective.record(max_abs_diff(n1.coords(), &flipped));

        let c = rng.random_range(-5.0..5.0);
        let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
        let scale = u.iter().map(|x| x * x).sum::<f64>() * c.abs();
        dependent.record(plucker_embed(&u, &cu)?.norm() / scale.max(1.0));
        // independent: v has a component orthogonal to u
        independent.record(if p.norm() > 0.0 { 0.0 } else { 1.0 });

        let u4 = uniform_vec(&mut rng, 4, 1.0);
        let v4 = uniform_vec(&mut rng, 4, 1.0);
        relation.record(plucker_relation_residual(&plucker_embed(&u4, &v4)?)?.abs());
    }
    Ok(SuiteReport {
        suite: "geometry",
        outcomes: [formula, bilinear, antisym, projective, dependent, independent, relation]
            .into_iter()
            .map(Tally::finish)
            .collect(),
    })
}

/// Adds `U(-0.3, 0.3)` noise to every non-weight tensor so biases and norm
/// affine terms are generic.
fn perturb_non_weights<S: Params<Tensor<f64>>>(params: &mut S, rng: &mut ChaCha8Rng) {
    params.visit_mut("", &mut |name, t| {
        if !name.ends_with("weight") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    });
}

fn leaves<S: Params<Tensor<f64>>>(params: &S) -> Vec<Tensor<f64>> {
    params.named().into_iter().map(|(_, t)| t.clone()).collect()
}

fn rebind<S: Params<Tensor<f64>>>(params: &S, vars: &[Var]) -> S::Mapped<Var> {
    let mut it = vars.iter();
    params.map(&mut |_| *it.next().expect("one var per leaf"))
}

/// `sum(out ⊙ W)` for a fixed random `W`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let y = g.mul(out, w)?;
    g.sum(y)
}

const GRADIENT_FAMILIES: [&str; 13] = [
    "matmul",
    "linear",
    "add / sub / mul / scale",
    "concat + sigmoid + gelu",
    "softmax",
    "layer norm",
    "embedding + cross-entropy",
    "plucker embed + normalize",
    "grassmann features",
    "gated fusion",
    "causal attention",
    "grassmann block",
    "attention block",
];

fn gradient_instance(family: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n) = (dim(1, 6), dim(1, 6), dim(1, 6));
    let (rows, cols) = (dim(2, 6), dim(3, 7));
    let l = dim(3, 10);
    let r = dim(2, 6);
    let d = dim(3, 6);
    let d_block = [8, 12, 16][dim(0, 2)];
    let seed: u64 = rng.random();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let report = match family {
        0 => {
            let out_w = uniform(rng, &[m, n], 1.0);
            grad_check(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weighted_sum(g, y, &out_w)
                },
                &[uniform(rng, &[m, k], 1.0), uniform(rng, &[k, n], 1.0)],
                h,
            )?
        }
        1 => {
            let out_w = uniform(rng, &[m, n], 1.0);
            grad_check(
                |g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2]))?;
                    weighted_sum(g, y, &out_w)
                },
                &[uniform(rng, &[m, k], 1.0), uniform(rng, &[n, k], 1.0), uniform(rng, &[n], 1.0)],
                h,
            )?
        }
        2 => {
            let out_w = uniform(rng, &[rows, cols], 1.0);
            grad_check(
                |g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.mul(a, v[2])?;
                    let c = g.sub(b, v[3])?;
                    let s = g.scale(c, 0.7)?;
                    weighted_sum(g, s, &out_w)
                },
                &[
                    uniform(rng, &[rows, cols], 1.0),
                    uniform(rng, &[cols], 1.0),
                    uniform(rng, &[rows, cols], 1.0),
                    uniform(rng, &[rows, cols], 1.0),
                ],
                h,
            )?
        }
        3 => {
            let out_w = uniform(rng, &[rows, 2 * cols], 1.0);
            grad_check(
                |g, v| {
                    let s = g.sigmoid(v[0])?;
                    let e = g.gelu(v[1])?;
                    let c = g.concat(&[s, e])?;
                    weighted_sum(g, c, &out_w)
                },
                &[uniform(rng, &[rows, cols], 3.0), uniform(rng, &[rows, cols], 3.0)],
                h,
            )?
        }
        4 => {
            let out_w = uniform(rng, &[rows, cols], 1.0);
            grad_check(
                |g, v| {
                    let y = g.softmax(v[0])?;
                    weighted_sum(g, y, &out_w)
                },
                &[uniform(rng, &[rows, cols], 2.0)],
                h,
            )?
        }
        5 => {
            let out_w = uniform(rng, &[rows, cols], 1.0);
            let gain: Vec<f64> = (0..cols).map(|_| 1.0 + rng.random_range(-0.3..0.3)).collect();
            grad_check(
                |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
                    weighted_sum(g, y, &out_w)
                },
                &[
                    uniform(rng, &[rows, cols], 2.0),
                    Tensor::new([cols], gain).expect("shape"),
                    uniform(rng, &[cols], 0.3),
                ],
                h,
            )?
        }
        6 => {
            let vocab = cols + 2;
            let ids: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
            grad_check(
                |g, v| {
                    let e = g.embedding(v[0], &ids)?;
                    let logits = g.matmul(e, v[1])?;
                    g.cross_entropy(logits, &targets)
                },
                &[uniform(rng, &[vocab, d], 1.0), uniform(rng, &[d, vocab], 1.0)],
                h,
            )?
        }
        7 => {
            let out_w = uniform(rng, &[rows, plucker_dim(r)], 1.0);
            grad_check(
                |g, v| {
                    let p = g.plucker_embed(v[0], v[1])?;
                    let q = g.plucker_normalize(p, DEFAULT_PLUCKER_EPS)?;
                    weighted_sum(g, q, &out_w)
                },
                &[uniform(rng, &[rows, r], 1.0), uniform(rng, &[rows, r], 1.0)],
                h,
            )?
        }
        8 => {
            let offsets = random_offsets(rng, l);
            let pairing = if rng.random() { Pairing::Backward } else { Pairing::Forward };
            let out_w = uniform(rng, &[2 * l, d], 1.0);
            grad_check(
                |g, v| {
                    let mix = MixSettings {
                        offsets: &offsets,
                        pairing,
                        eps: DEFAULT_PLUCKER_EPS,
                    };
                    let proj = LinearParams { weight: v[1], bias: v[2] };
                    let f = grassmann_features(g, v[0], &proj, l, &mix)?;
                    weighted_sum(g, f, &out_w)
                },
                &[
                    uniform(rng, &[2 * l, r.max(3)], 1.0),
                    uniform(rng, &[d, plucker_dim(r.max(3))], 1.0),
                    uniform(rng, &[d], 1.0),
                ],
                h,
            )?
        }
        9 => {
            let out_w = uniform(rng, &[rows, d], 1.0);
            grad_check(
                |g, v| {
                    let gate = LinearParams { weight: v[2], bias: v[3] };
                    let y = gated_fusion(g, v[0], v[1], &gate)?;
                    weighted_sum(g, y, &out_w)
                },
                &[
                    uniform(rng, &[rows, d], 1.0),
                    uniform(rng, &[rows, d], 1.0),
                    uniform(rng, &[d, 2 * d], 1.0),
                    uniform(rng, &[d], 1.0),
                ],
                h,
            )?
        }
        10 => {
            let heads = [1, 2][rng.random_range(0..2)];
            let width = 2 * d;
            let out_w = uniform(rng, &[2 * l, width], 1.0);
            grad_check(
                |g, v| {
                    let y = causal_attention(g, v[0], v[1], v[2], heads, l)?;
                    weighted_sum(g, y, &out_w)
                },
                &[
                    uniform(rng, &[2 * l, width], 1.0),
                    uniform(rng, &[2 * l, width], 1.0),
                    uniform(rng, &[2 * l, width], 1.0),
                ],
                h,
            )?
        }
        11 => {
            let offsets = random_offsets(rng, l);
            let rr = [4, 8][rng.random_range(0..2)];
            let mut params: GrassmannBlockParams<Tensor<f64>> =
                GrassmannBlockParams::init(&mut Initializer::new(seed, 0.3), d_block, rr, 4 * d_block);
            perturb_non_weights(&mut params, rng);
            let hidden = uniform(rng, &[l, d_block], 1.0);
            let out_w = uniform(rng, &[l, d_block], 1.0);
            let mut all = vec![hidden];
            all.extend(leaves(&params));
            grad_check(
                |g, v| {
                    let p = rebind(&params, &v[1..]);
                    let mix = MixSettings {
                        offsets: &offsets,
                        pairing: Pairing::Backward,
                        eps: DEFAULT_PLUCKER_EPS,
                    };
                    let y = grassmann_block_forward(g, v[0], &p, &mix, &Pass::inference(l))?;
                    weighted_sum(g, y, &out_w)
                },
                &all,
                h,
            )?
        }
        _ => {
            let mut params: AttentionBlockParams<Tensor<f64>> =
                AttentionBlockParams::init(&mut Initializer::new(seed, 0.3), d_block, 4 * d_block);
            perturb_non_weights(&mut params, rng);
            let hidden = uniform(rng, &[l, d_block], 1.0);
            let out_w = uniform(rng, &[l, d_block], 1.0);
            let mut all = vec![hidden];
            all.extend(leaves(&params));
            grad_check(
                |g, v| {
                    let p = rebind(&params, &v[1..]);
                    let y = attention_block_forward(g, v[0], &p, 4, &Pass::inference(l))?;
                    weighted_sum(g, y, &out_w)
                },
                &all,
                h,
            )?
        }
    };
    Ok(report.max_rel_err)
}

fn random_offsets(rng: &mut ChaCha8Rng, l: usize) -> Vec<usize> {
    let mut offsets: Vec<usize> = (1..l).filter(|_| rng.random_bool(0.4)).collect();
    if offsets.is_empty() {
        offsets.push(1);
    }
    offsets
}

/// Central-difference checks (`h = 1e-5`, double precision) of every
/// differentiable op and both blocks. Instances cycle through the op
/// families with random shapes and values.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tallies: Vec<Tally> = GRADIENT_FAMILIES.iter().map(|n| Tally::new(n, 1e-5)).collect();
    for i in 0..instances {
        let family = i % GRADIENT_FAMILIES.len();
        tallies[family].record(gradient_instance(family, &mut rng)?);
    }
    Ok(SuiteReport {
        suite: "gradient",
        outcomes: tallies.into_iter().filter(|t| t.trials > 0).map(Tally::finish).collect(),
    })
}

/// Configuration of the causality probes: `d = 64`, two layers, length 32.
pub fn causality_config(kind: BlockKind, pairing: Pairing) -> ModelConfig {
    ModelConfig {
        block_kind: kind,
        vocab_size: 256,
        d_model: 64,
        reduced_dim: 16,
        layers: 2,
        d_ff: 256,
        max_len: 32,
        heads: 4,
        windows: WindowSchedule::uniform(OffsetSet::new([1, 2, 4, 8]).expect("valid"), 2),
        pairing,
        ..ModelConfig::default()
    }
}

/// Number of `(s, t)` with `t < s` whose logits change bitwise when the
/// token at `s` is replaced.
pub fn causal_violations<T: Element>(model: &LanguageModel<T>, tokens: &[usize]) -> Result<usize> {
    let base = model.logits(tokens)?;
    let vocab = model.config.vocab_size;
    let mut violations = 0;
    for s in 0..tokens.len() {
        let mut changed = tokens.to_vec();
        changed[s] = (changed[s] + 1 + s % (vocab - 1)) % vocab;
        let out = model.logits(&changed)?;
        for t in 0..s {
            let same = out.row(t).iter().zip(base.row(t)).all(|(a, b)| a == b || (a.is_nan() && b.is_nan()));
            if !same {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

/// Flips every input position of both model kinds and demands bit-identical
/// logits before it; also confirms the forward pairing leaks.
pub fn causality_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..32).map(|_| rng.random_range(0..256)).collect();
    let pairs = 32 * 31 / 2;
    let mut outcomes = Vec::new();
    for kind in [BlockKind::Grassmann, BlockKind::Attention] {
        let cfg = causality_config(kind, Pairing::Backward);
        let v32 = causal_violations(&LanguageModel::<f32>::init(cfg.clone(), seed)?, &tokens)?;
        let v64 = causal_violations(&LanguageModel::<f64>::init(cfg, seed)?, &tokens)?;
        outcomes.push(CheckOutcome {
            name: format!("{kind} model is causal (f32 + f64)"),
            trials: 2 * pairs,
            worst: (v32 + v64) as f64,
            tolerance: 0.0,
            passed: v32 + v64 == 0,
        });
    }
    let leaky = LanguageModel::<f32>::init(causality_config(BlockKind::Grassmann, Pairing::Forward), seed)?;
    let leaks = causal_violations(&leaky, &tokens)?;
    outcomes.push(CheckOutcome {
        name: "forward pairing leaks the future".into(),
        trials: pairs,
        worst: leaks as f64,
        tolerance: 1.0,
        passed: leaks >= 1,
    });
    Ok(SuiteReport {
        suite: "causality",
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_suite_passes() {
        let report = geometry_suite(1000, 1).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.outcomes.iter().all(|o| o.trials == 1000));
    }

    #[test]
    fn gradient_suite_covers_every_family() {
        let report = gradient_suite(2 * GRADIENT_FAMILIES.len(), 0).unwrap();
        assert_eq!(report.outcomes.len(), GRADIENT_FAMILIES.len());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn causality_suite_passes() {
        let report = causality_suite(3).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.outcomes[2].worst > 0.0);
    }

    #[test]
    fn report_display() {
        let r = SuiteReport {
            suite: "demo",
            outcomes: vec![CheckOutcome {
                name: "x".into(),
                trials: 3,
                worst: 2.0,
                tolerance: 1.0,
                passed: false,
            }],
        };
        let text = r.to_string();
        assert!(text.starts_with("demo suite: FAIL"));
        assert!(text.contains("FAIL x"));
    }
}
