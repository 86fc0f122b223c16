//! Token and position embeddings, a stack of mixing blocks, and the LM head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::{
    attention_block_forward, grassmann_block_forward, AttentionBlockParams, GrassmannBlockParams, MixSettings,
    OffsetSet, Pairing, Pass, WindowSchedule,
};
use crate::error::{Error, Result};
use crate::geometry::{plucker_dim, DEFAULT_PLUCKER_EPS};
use crate::params::{bind, join, Initializer, Params};
use crate::tensor::{Element, Tensor};

/// Which sequence-mixing layer a model stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Grassmann,
    Attention,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Grassmann => "grassmann",
            BlockKind::Attention => "attention",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grassmann" => Ok(BlockKind::Grassmann),
            "attention" => Ok(BlockKind::Attention),
            other => Err(Error::Config(format!("unknown block kind '{other}'"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub block_kind: BlockKind,
    pub vocab_size: usize,
    pub d_model: usize,
    pub reduced_dim: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub heads: usize,
    pub windows: WindowSchedule,
    pub pairing: Pairing,
    pub dropout: f64,
    pub tie_lm_head: bool,
    pub init_std: f64,
    pub plucker_eps: f64,
}

/// Named configurations accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 6] = [
    "grassmann-6x128",
    "transformer-6x128",
    "grassmann-12x256",
    "transformer-12x256",
    "grassmann-desk",
    "transformer-desk",
];

const DEPTH_PATTERN_12: [usize; 12] = [1, 1, 2, 2, 4, 4, 8, 8, 12, 12, 16, 16];

impl Default for ModelConfig {
    /// The byte-level desk-scale Grassmann model.
    fn default() -> Self {
        ModelConfig {
            block_kind: BlockKind::Grassmann,
            vocab_size: 256,
            d_model: 128,
            reduced_dim: 16,
            layers: 4,
            d_ff: 512,
            max_len: 128,
            heads: 4,
            windows: WindowSchedule::uniform(OffsetSet::new([1, 2, 4, 8]).expect("valid"), 4),
            pairing: Pairing::Backward,
            dropout: 0.1,
            tie_lm_head: false,
            init_std: 0.02,
            plucker_eps: DEFAULT_PLUCKER_EPS,
        }
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (kind, shape) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?;
        let block_kind = match kind {
            "grassmann" => BlockKind::Grassmann,
            "transformer" => BlockKind::Attention,
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        };
        let base = ModelConfig {
            block_kind,
            ..ModelConfig::default()
        };
        let wide = ModelConfig {
            vocab_size: 30522,
            d_model: 256,
            reduced_dim: 32,
            d_ff: 1024,
            tie_lm_head: true,
            ..base.clone()
        };
        let cfg = match shape {
            "desk" => base,
            "6x128" => ModelConfig {
                layers: 6,
                max_len: 128,
                windows: WindowSchedule::uniform(OffsetSet::new([1, 2, 4, 8, 12, 16])?, 6),
                ..wide
            },
            "12x256" => ModelConfig {
                layers: 12,
                max_len: 256,
                windows: WindowSchedule::from_depth_pattern(&DEPTH_PATTERN_12)?,
                ..wide
            },
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be >= 2", self.vocab_size));
        }
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return fail("layers, d_model, d_ff and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std {} must be finite and non-negative", self.init_std));
        }
        match self.block_kind {
            BlockKind::Grassmann => {
                if self.reduced_dim < 2 || self.reduced_dim >= self.d_model {
                    return fail(format!(
                        "reduced_dim {} must satisfy 2 <= r < d_model = {}",
                        self.reduced_dim, self.d_model
                    ));
                }
                if !(self.plucker_eps > 0.0) {
                    return fail("plucker_eps must be positive".into());
                }
                self.windows.validate(self.layers, self.max_len)
            }
            BlockKind::Attention => {
                if self.heads == 0 || self.d_model % self.heads != 0 {
                    return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
                }
                Ok(())
            }
        }
    }

    /// Canonical `key = value` text, one line per field.
    pub fn to_text(&self) -> String {
        format!(
            "block_kind = {}\nvocab_size = {}\nd_model = {}\nreduced_dim = {}\nlayers = {}\nd_ff = {}\n\
             max_len = {}\nheads = {}\nwindows = {}\npairing = {}\ndropout = {}\ntie_lm_head = {}\n\
             init_std = {}\nplucker_eps = {}\n",
            self.block_kind,
            self.vocab_size,
            self.d_model,
            self.reduced_dim,
            self.layers,
            self.d_ff,
            self.max_len,
            self.heads,
            self.windows,
            self.pairing,
            self.dropout,
            self.tie_lm_head,
            self.init_std,
            self.plucker_eps,
        )
    }

    /// Parses `key = value` lines over [`ModelConfig::default`]. Blank lines
    /// and `#` comments are ignored. A `windows` value without `;` applies
    /// the same offsets to every layer.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut windows: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn fmt::Display| Error::Config(format!("line {}: {key}: {e}", no + 1));
            match key {
                "block_kind" => cfg.block_kind = value.parse()?,
                "vocab_size" => cfg.vocab_size = value.parse().map_err(|e| bad(&e))?,
                "d_model" => cfg.d_model = value.parse().map_err(|e| bad(&e))?,
                "reduced_dim" => cfg.reduced_dim = value.parse().map_err(|e| bad(&e))?,
                "layers" => cfg.layers = value.parse().map_err(|e| bad(&e))?,
                "d_ff" => cfg.d_ff = value.parse().map_err(|e| bad(&e))?,
                "max_len" => cfg.max_len = value.parse().map_err(|e| bad(&e))?,
                "heads" => cfg.heads = value.parse().map_err(|e| bad(&e))?,
                "windows" => windows = Some(value.to_string()),
                "pairing" => cfg.pairing = value.parse()?,
                "dropout" => cfg.dropout = value.parse().map_err(|e| bad(&e))?,
                "tie_lm_head" => cfg.tie_lm_head = value.parse().map_err(|e| bad(&e))?,
                "init_std" => cfg.init_std = value.parse().map_err(|e| bad(&e))?,
                "plucker_eps" => cfg.plucker_eps = value.parse().map_err(|e| bad(&e))?,
                _ => return Err(Error::Config(format!("line {}: unknown key '{key}'", no + 1))),
            }
        }
        cfg.windows = match windows {
            Some(w) if w.contains(';') => w.parse()?,
            Some(w) => WindowSchedule::uniform(w.parse()?, cfg.layers),
            None => WindowSchedule::uniform(cfg.windows.layer(0).clone(), cfg.layers),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn block_param_count(&self) -> Vec<(&'static str, usize)> {
        let (d, dff) = (self.d_model, self.d_ff);
        let tail = [("ffn", 2 * d * dff + dff + d), ("norms", 4 * d)];
        let mix = match self.block_kind {
            BlockKind::Grassmann => {
                let (r, c) = (self.reduced_dim, plucker_dim(self.reduced_dim));
                vec![("reduce", r * d + r), ("plucker", d * c + d), ("gate", 2 * d * d + d)]
            }
            BlockKind::Attention => vec![("attention", 4 * d * d + 3 * d)],
        };
        mix.into_iter().chain(tail).collect()
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Learnable-element counts per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.components {
            writeln!(f, "{name:<24}{n:>12}")?;
        }
        write!(f, "{:<24}{:>12}", "total", self.total)
    }
}

/// Exact number of learnable elements implied by `config`.
pub fn param_count(config: &ModelConfig) -> ParamCount {
    let (v, d) = (config.vocab_size, config.d_model);
    let mut components = vec![
        ("embed.token".to_string(), v * d),
        ("embed.position".to_string(), config.max_len * d),
    ];
    for (name, n) in config.block_param_count() {
        components.push((format!("blocks.{name} (x{})", config.layers), n * config.layers));
    }
    if !config.tie_lm_head {
        components.push(("head.weight".to_string(), v * d));
    }
    components.push(("head.bias".to_string(), v));
    let total = components.iter().map(|(_, n)| n).sum();
    ParamCount { components, total }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockStack<P> {
    Grassmann(Vec<GrassmannBlockParams<P>>),
    Attention(Vec<AttentionBlockParams<P>>),
}

/// Every learned array of a language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    /// `[V x d]`
    pub token: P,
    /// `[L_max x d]`
    pub position: P,
    pub blocks: BlockStack<P>,
    /// `[V x d]`; `None` when the head reuses the token table.
    pub head_weight: Option<P>,
    /// `[V]`
    pub head_bias: P,
}

impl<P> Params<P> for ModelParams<P> {
    type Mapped<Q> = ModelParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "embed.token"), &self.token);
        f(join(prefix, "embed.position"), &self.position);
        let blocks = join(prefix, "blocks");
        match &self.blocks {
            BlockStack::Grassmann(bs) => bs.iter().enumerate().for_each(|(i, b)| b.visit(&join(&blocks, &i.to_string()), f)),
            BlockStack::Attention(bs) => bs.iter().enumerate().for_each(|(i, b)| b.visit(&join(&blocks, &i.to_string()), f)),
        }
        if let Some(w) = &self.head_weight {
            f(join(prefix, "head.weight"), w);
        }
        f(join(prefix, "head.bias"), &self.head_bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(join(prefix, "embed.token"), &mut self.token);
        f(join(prefix, "embed.position"), &mut self.position);
        let blocks = join(prefix, "blocks");
        match &mut self.blocks {
            BlockStack::Grassmann(bs) => bs
                .iter_mut()
                .enumerate()
                .for_each(|(i, b)| b.visit_mut(&join(&blocks, &i.to_string()), f)),
            BlockStack::Attention(bs) => bs
                .iter_mut()
                .enumerate()
                .for_each(|(i, b)| b.visit_mut(&join(&blocks, &i.to_string()), f)),
        }
        if let Some(w) = &mut self.head_weight {
            f(join(prefix, "head.weight"), w);
        }
        f(join(prefix, "head.bias"), &mut self.head_bias);
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ModelParams<Q> {
        let token = f(&self.token);
        let position = f(&self.position);
        let blocks = match &self.blocks {
            BlockStack::Grassmann(bs) => BlockStack::Grassmann(bs.iter().map(|b| b.map(f)).collect()),
            BlockStack::Attention(bs) => BlockStack::Attention(bs.iter().map(|b| b.map(f)).collect()),
        };
        let head_weight = self.head_weight.as_ref().map(&mut *f);
        ModelParams {
            token,
            position,
            blocks,
            head_weight,
            head_bias: f(&self.head_bias),
        }
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T: Element> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Element> LanguageModel<T> {
    /// Weights `N(0, init_std)`, biases zero, norm gains one; deterministic
    /// in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed, config.init_std);
        let (v, d, dff) = (config.vocab_size, config.d_model, config.d_ff);
        let token = init.weight(&[v, d]);
        let position = init.weight(&[config.max_len, d]);
        let blocks = match config.block_kind {
            BlockKind::Grassmann => BlockStack::Grassmann(
                (0..config.layers)
                    .map(|_| GrassmannBlockParams::init(&mut init, d, config.reduced_dim, dff))
                    .collect(),
            ),
            BlockKind::Attention => {
                BlockStack::Attention((0..config.layers).map(|_| AttentionBlockParams::init(&mut init, d, dff)).collect())
            }
        };
        let head_weight = (!config.tie_lm_head).then(|| init.weight(&[v, d]));
        Ok(LanguageModel {
            params: ModelParams {
                token,
                position,
                blocks,
                head_weight,
                head_bias: Tensor::zeros([v]),
            },
            config,
        })
    }

    pub fn num_params(&self) -> usize {
        crate::params::numel(&self.params)
    }

    /// Logits `[L x V]` of one sequence with dropout off.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = bind(&mut g, &self.params);
        let out = lm_forward(&mut g, &self.config, &p, tokens, &Pass::inference(tokens.len()))?;
        Ok(g.value(out).clone())
    }
}

/// `E[x_t] + P[t]` for `tokens` holding sequences of `seq_len` tokens.
pub fn embed_tokens<T: Element>(
    g: &mut Graph<T>,
    table: Var,
    positions: Var,
    tokens: &[usize],
    seq_len: usize,
) -> Result<Var> {
    let max_len = g.value(positions).rows();
    if seq_len == 0 || seq_len > max_len {
        return Err(Error::IndexOutOfRange {
            what: "sequence length",
            index: seq_len,
            bound: max_len + 1,
        });
    }
    if tokens.is_empty() || tokens.len() % seq_len != 0 {
        return Err(Error::shape(
            "embed_tokens",
            format!("{} tokens do not split into sequences of length {seq_len}", tokens.len()),
        ));
    }
    let e = g.embedding(table, tokens)?;
    let pos: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
    let p = g.embedding(positions, &pos)?;
    g.add(e, p)
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Logits `[n x V]` for `tokens` laid out as `n / pass.seq_len` sequences.
pub fn lm_forward<T: Element>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    tokens: &[usize],
    pass: &Pass,
) -> Result<Var> {
    let mut h = embed_tokens(g, p.token, p.position, tokens, pass.seq_len)?;
    let dropout = if pass.training { config.dropout } else { 0.0 };
    for layer in 0..config.layers {
        let lp = Pass {
            dropout,
            seed: layer_seed(pass.seed, layer),
            ..*pass
        };
        h = match &p.blocks {
            BlockStack::Grassmann(bs) => {
                let mix = MixSettings {
                    offsets: config.windows.layer(layer).as_slice(),
                    pairing: config.pairing,
                    eps: config.plucker_eps,
                };
                grassmann_block_forward(g, h, &bs[layer], &mix, &lp)?
            }
            BlockStack::Attention(bs) => attention_block_forward(g, h, &bs[layer], config.heads, &lp)?,
        };
    }
    let w = p.head_weight.unwrap_or(p.token);
    g.linear(h, w, Some(p.head_bias))
}

/// Autoregressive continuation of `prompt`. Temperature `0` picks the
/// argmax; otherwise tokens are sampled from `softmax(logits / temperature)`.
/// The context fed to the model is the last `max_len` tokens.
pub fn generate<T: Element>(
    model: &LanguageModel<T>,
    prompt: &[usize],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must not be empty"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature {temperature} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = prompt.to_vec();
    for _ in 0..max_new {
        let start = out.len().saturating_sub(model.config.max_len);
        let logits = model.logits(&out[start..])?;
        let last = logits.row(logits.rows() - 1);
        let next = if temperature == 0.0 {
            argmax(last)
        } else {
            let scaled: Vec<f64> = last.iter().map(|v| v.to_f64().unwrap_or(0.0) / temperature).collect();
            let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
            let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
            let mut pick = w.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    pick = i;
                    break;
                }
                u -= wi;
            }
            pick
        };
        out.push(next);
    }
    Ok(out)
}

fn argmax<T: Element>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}
