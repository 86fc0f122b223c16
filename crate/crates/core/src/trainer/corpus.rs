use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Vocabulary size of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Bytes of a text file as token ids, split into a leading training segment
/// and a trailing validation segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub path: PathBuf,
    tokens: Vec<usize>,
    split: usize,
}

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`encode`]. Invalid UTF-8 sequences are replaced with U+FFFD.
pub fn decode(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| Error::IndexOutOfRange {
                what: "byte vocabulary",
                index: i,
                bound: BYTE_VOCAB,
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

impl Corpus {
    /// `train_fraction` of the tokens (rounded to the nearest token) go to
    /// training, the rest to validation.
    pub fn from_bytes(path: impl Into<PathBuf>, bytes: &[u8], train_fraction: f64) -> Result<Self> {
        let path = path.into();
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!("split fraction {train_fraction} outside (0, 1)")));
        }
        let tokens: Vec<usize> = bytes.iter().map(|&b| usize::from(b)).collect();
        let split = (tokens.len() as f64 * train_fraction).round() as usize;
        if split == 0 || split == tokens.len() {
            return Err(Error::Corpus {
                path,
                detail: format!("{} bytes leave an empty segment at split {train_fraction}", tokens.len()),
            });
        }
        Ok(Corpus { path, tokens, split })
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn valid(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads `path` as bytes. The file must hold at least `2 * block_size` bytes.
pub fn load_corpus(path: impl AsRef<Path>, train_fraction: f64, block_size: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Corpus {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if bytes.len() < 2 * block_size {
        return Err(Error::Corpus {
            path: path.to_path_buf(),
            detail: format!("{} bytes, need at least {}", bytes.len(), 2 * block_size),
        });
    }
    Corpus::from_bytes(path, &bytes, train_fraction)
}
