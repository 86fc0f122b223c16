//! Sequence-mixing blocks.
//!
//! Both blocks map `[n x d]` hidden states to `[n x d]`, where the `n` rows
//! are `n / seq_len` independent sequences laid end to end. They share the
//! post-norm scaffold
//!
//! ```text
//! ĥ   = Dropout(LayerNorm(mix(H)))
//! out = LayerNorm(ĥ + W2 gelu(W1 ĥ + b1) + b2)
//! ```
//!
//! and differ only in `mix`: gated Plücker features for
//! [`grassmann_block_forward`], residual multi-head causal attention for
//! [`attention_block_forward`].

mod attention;
mod grassmann;
mod window;

pub use attention::{attention_block_forward, attention_weights, causal_attention, AttentionBlockParams};
pub use grassmann::{
    gated_fusion, grassmann_block_forward, grassmann_features, reduce_states, GrassmannBlockParams, MixSettings,
};
pub(crate) use grassmann::{pair_average, project_features};
pub use window::{valid_offsets, OffsetSet, Pairing, WindowSchedule};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{FeedForwardParams, NormParams};
use crate::tensor::Element;

/// Layer-norm stabilizer used by every block.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-call settings shared by both block kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pass {
    /// Length of each sequence; the input row count must be a multiple.
    pub seq_len: usize,
    pub training: bool,
    pub dropout: f64,
    /// Seed of this call's dropout mask.
    pub seed: u64,
}

impl Pass {
    /// Deterministic forward with dropout disabled.
    pub fn inference(seq_len: usize) -> Self {
        Pass {
            seq_len,
            training: false,
            dropout: 0.0,
            seed: 0,
        }
    }

    fn check_rows(&self, op: &'static str, rows: usize) -> Result<()> {
        if self.seq_len == 0 || rows % self.seq_len != 0 {
            return Err(Error::shape(
                op,
                format!("{rows} rows do not split into sequences of length {}", self.seq_len),
            ));
        }
        Ok(())
    }
}

/// `W2 gelu(W1 x + b1) + b2`, row-wise.
pub fn feed_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &FeedForwardParams<Var>) -> Result<Var> {
    let h = g.linear(x, p.up.weight, Some(p.up.bias))?;
    let h = g.gelu(h)?;
    g.linear(h, p.down.weight, Some(p.down.bias))
}

pub(crate) fn layer_norm<T: Element>(g: &mut Graph<T>, x: Var, p: &NormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gain, p.bias, T::lit(LAYER_NORM_EPS))
}

/// `ĥ = Dropout(LN1(mixed))`, then `LN2(ĥ + FFN(ĥ))`.
pub(crate) fn post_norm_tail<T: Element>(
    g: &mut Graph<T>,
    mixed: Var,
    norm1: &NormParams<Var>,
    ffn: &FeedForwardParams<Var>,
    norm2: &NormParams<Var>,
    pass: &Pass,
) -> Result<Var> {
    let h = layer_norm(g, mixed, norm1)?;
    let h = g.dropout(h, pass.dropout, pass.training, pass.seed)?;
    let f = feed_forward(g, h, ffn)?;
    let s = g.add(h, f)?;
    layer_norm(g, s, norm2)
}
