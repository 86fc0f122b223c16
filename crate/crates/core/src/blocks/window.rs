use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which neighbour a position is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Pairing {
    /// Position `t` is paired with `t - Δ`; features at `t` only see tokens
    /// at or before `t`.
    #[default]
    Backward,
    /// Position `t` is paired with `t + Δ`. Leaks future tokens; only valid
    /// for non-autoregressive use.
    Forward,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::Backward => "backward",
            Pairing::Forward => "forward",
        })
    }
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(Pairing::Backward),
            "forward" => Ok(Pairing::Forward),
            other => Err(Error::Config(format!("unknown pairing '{other}'"))),
        }
    }
}

impl Pairing {
    /// Partner of 0-based position `t` at offset `delta` inside a sequence of
    /// length `len`, if it exists.
    pub fn partner(self, t: usize, delta: usize, len: usize) -> Option<usize> {
        match self {
            Pairing::Backward => t.checked_sub(delta),
            Pairing::Forward => Some(t + delta).filter(|&s| s < len),
        }
    }
}

/// Offsets usable at 1-based position `t` of a length-`len` sequence.
///
/// With [`Pairing::Backward`] this is `{Δ : t - Δ >= 1}`; with
/// [`Pairing::Forward`] it is `{Δ : t + Δ <= len}`.
pub fn valid_offsets(t: usize, offsets: &[usize], len: usize, pairing: Pairing) -> Vec<usize> {
    assert!(t >= 1 && t <= len, "position {t} outside 1..={len}");
    offsets
        .iter()
        .copied()
        .filter(|&d| pairing.partner(t - 1, d, len).is_some())
        .collect()
}

/// Sorted, de-duplicated set of pairing offsets for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OffsetSet(Vec<usize>);

impl OffsetSet {
    pub fn new(offsets: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = offsets.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("offset set must be non-empty".into()));
        }
        if v[0] == 0 {
            return Err(Error::Config("offsets must be >= 1".into()));
        }
        Ok(OffsetSet(v))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }
}

impl fmt::Display for OffsetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for OffsetSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parsed: std::result::Result<Vec<usize>, _> =
            s.split(',').map(|x| x.trim().parse::<usize>()).collect();
        OffsetSet::new(parsed.map_err(|e| Error::Config(format!("bad offset list '{s}': {e}")))?)
    }
}

/// Per-layer offset sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WindowSchedule {
    per_layer: Vec<OffsetSet>,
}

impl WindowSchedule {
    /// The same set at every layer.
    pub fn uniform(set: OffsetSet, layers: usize) -> Self {
        WindowSchedule {
            per_layer: vec![set; layers],
        }
    }

    pub fn per_layer(sets: Vec<OffsetSet>) -> Self {
        WindowSchedule { per_layer: sets }
    }

    /// One single-offset set per layer, e.g. `(1,1,2,2,4,4,...)`.
    pub fn from_depth_pattern(pattern: &[usize]) -> Result<Self> {
        Ok(WindowSchedule {
            per_layer: pattern
                .iter()
                .map(|&d| OffsetSet::new([d]))
                .collect::<Result<_>>()?,
        })
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn layer(&self, i: usize) -> &OffsetSet {
        &self.per_layer[i]
    }

    pub fn validate(&self, layers: usize, max_len: usize) -> Result<()> {
        if self.per_layer.len() != layers {
            return Err(Error::Config(format!(
                "window schedule has {} layer sets for {layers} layers",
                self.per_layer.len()
            )));
        }
        if let Some(set) = self.per_layer.iter().find(|s| s.max() >= max_len) {
            return Err(Error::Config(format!(
                "offset {} must be smaller than max_len {max_len}",
                set.max()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for WindowSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, set) in self.per_layer.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{set}")?;
        }
        Ok(())
    }
}

impl FromStr for WindowSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(WindowSchedule {
            per_layer: s.split(';').map(str::parse).collect::<Result<_>>()?,
        })
    }
}
