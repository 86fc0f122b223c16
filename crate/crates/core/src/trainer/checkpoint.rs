//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GRFL"  u32 version  u64 config_len  config text (UTF-8)
//! u64 tensor_count
//! per tensor: u32 name_len  name  u8 dtype  u32 ndim  u64 dims[ndim]  u64 offset
//! raw data: IEEE-754 binary32, tensors in canonical order
//! ```
//!
//! `offset` is relative to the start of the raw data section.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GRFL";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(model: &LanguageModel<f32>) -> Vec<u8> {
    let named = model.params.named();
    let config = model.config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in memory")))
    }
}

/// Parses a checkpoint into its embedded configuration and named tensors.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor<f32>)>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let len = r.u64("config length")?;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_text(text)?;

    let count = r.u64("tensor count")?;
    let mut table = Vec::new();
    for i in 0..count {
        let n = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor {i} name is not UTF-8: {e}")))?;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("tensor '{name}' has unknown dtype code {dtype}")));
        }
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let offset = r.u64("data offset")?;
        table.push((name, shape, offset));
    }

    let data = &bytes[r.pos..];
    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape, offset) in table {
        let numel: usize = shape.iter().product();
        let end = offset
            .checked_add(4 * numel)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: data of tensor '{name}' is incomplete")))?;
        let values = data[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, values)?));
    }
    Ok((config, tensors))
}

/// Builds a model of shape `config` from decoded tensors. Any difference in
/// names, order or shapes is an error naming the first offending tensor.
pub fn assemble(config: ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<LanguageModel<f32>> {
    let mut model = LanguageModel::init(ModelConfig { init_std: 0.0, ..config.clone() }, 0)?;
    model.config = config;
    let mut slots: Vec<(String, &mut Tensor<f32>)> = Vec::new();
    model.params.visit_mut("", &mut |name, t| slots.push((name, t)));
    let mut stored = tensors.into_iter();
    for (name, slot) in slots {
        let Some((got, t)) = stored.next() else {
            return Err(Error::Checkpoint(format!("tensor '{name}' is missing from the checkpoint")));
        };
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor '{name}', found '{got}'")));
        }
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some((extra, _)) = stored.next() {
        return Err(Error::Checkpoint(format!("unexpected tensor '{extra}' in the checkpoint")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &LanguageModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a model using the configuration stored in the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LanguageModel<f32>> {
    let (config, tensors) = decode_checkpoint(&read(path.as_ref())?)?;
    assemble(config, tensors)
}

/// Loads the tensors of a checkpoint into a model of shape `config`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, config: &ModelConfig) -> Result<LanguageModel<f32>> {
    let (_, tensors) = decode_checkpoint(&read(path.as_ref())?)?;
    assemble(config.clone(), tensors)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockKind;

    fn small(kind: BlockKind, d: usize) -> ModelConfig {
        ModelConfig {
            block_kind: kind,
            d_model: d,
            reduced_dim: 4,
            layers: 2,
            d_ff: 2 * d,
            max_len: 16,
            windows: "1,2,4".parse().map(|s| crate::blocks::WindowSchedule::uniform(s, 2)).unwrap(),
            ..ModelConfig::default()
        }
    }

    fn bits(m: &LanguageModel<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        m.params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [BlockKind::Grassmann, BlockKind::Attention] {
            for tie in [false, true] {
                let cfg = ModelConfig { tie_lm_head: tie, init_std: 0.7, ..small(kind, 16) };
                let mut m = LanguageModel::<f32>::init(cfg, 3).unwrap();
                m.params.head_bias.data_mut()[5] = f32::MIN_POSITIVE / 4.0;
                let path = dir.path().join(format!("{kind}-{tie}.grfl"));
                save_checkpoint(&m, &path).unwrap();
                let back = load_checkpoint(&path).unwrap();
                assert_eq!(back.config, m.config);
                assert_eq!(bits(&back), bits(&m));
            }
        }
    }

    #[test]
    fn header_layout() {
        let m = LanguageModel::<f32>::init(small(BlockKind::Grassmann, 8), 0).unwrap();
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..4], b"GRFL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(std::str::from_utf8(&bytes[16..16 + len]).unwrap(), m.config.to_text());
        let count = u64::from_le_bytes(bytes[16 + len..24 + len].try_into().unwrap()) as usize;
        assert_eq!(count, m.params.named().len());
        // raw data is the tail of the file
        assert!(bytes.len() > 4 * m.num_params());
        let tail = &bytes[bytes.len() - 4 * m.num_params()..];
        assert_eq!(&tail[..4], &m.params.token.data()[0].to_le_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = LanguageModel::<f32>::init(small(BlockKind::Attention, 8), 0).unwrap();
        let good = encode_checkpoint(&m);

        let mut bad = good.clone();
        bad[0] = b'X';
        let err = decode_checkpoint(&bad).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));

        for cut in [3, 10, 200, good.len() - 1] {
            let err = decode_checkpoint(&good[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.grfl");
        let a = LanguageModel::<f32>::init(small(BlockKind::Grassmann, 8), 0).unwrap();
        save_checkpoint(&a, &path).unwrap();

        let wider = small(BlockKind::Grassmann, 12);
        let err = load_checkpoint_as(&path, &wider).unwrap_err().to_string();
        assert!(err.contains("'embed.token'"), "{err}");

        let reduced = ModelConfig { reduced_dim: 5, ..small(BlockKind::Grassmann, 8) };
        let err = load_checkpoint_as(&path, &reduced).unwrap_err().to_string();
        assert!(err.contains("'blocks.0.reduce.weight'"), "{err}");

        let other = small(BlockKind::Attention, 8);
        let err = load_checkpoint_as(&path, &other).unwrap_err().to_string();
        assert!(err.contains("blocks.0.query.weight"), "{err}");

        let tied = ModelConfig { tie_lm_head: true, ..small(BlockKind::Grassmann, 8) };
        let err = load_checkpoint_as(&path, &tied).unwrap_err().to_string();
        assert!(err.contains("head.weight"), "{err}");

        let same_shape = ModelConfig { dropout: 0.3, ..small(BlockKind::Grassmann, 8) };
        assert_eq!(bits(&load_checkpoint_as(&path, &same_shape).unwrap()), bits(&a));
    }
}
