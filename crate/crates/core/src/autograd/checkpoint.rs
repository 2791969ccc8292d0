//! Binary checkpoint: magic, architecture JSON, named parameter table and
//! an optimizer-state blob. All integers and values are little-endian.
//!
//! ```text
//! "SNNCKPT1"
//! u64 json_len, json bytes
//! u32 entries, then per entry:
//!     u32 name_len, name bytes, u32 ndim, u64 × ndim dims, f32 × numel
//! u64 blob_len, blob bytes
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Scalar, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"SNNCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("invalid UTF-8 in checkpoint")]
    Utf8,
    #[error("parameter {name}: checkpoint shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub spec_json: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Vec<u8>,
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, spec_json: String, optimizer: Vec<u8>) -> Self {
        let params = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).cast::<f32>()))
            .collect();
        Self {
            spec_json,
            params,
            optimizer,
        }
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` whose name starts with `prefix`
    /// from the checkpoint. With `strict`, a missing name is an error;
    /// otherwise it is skipped. Returns the number of tensors copied.
    pub fn load_into<S: Scalar>(&self, store: &mut ParamStore<S>, prefix: &str, strict: bool) -> Result<usize, CheckpointError> {
        let ids: Vec<_> = store.ids().filter(|id| store.name(*id).starts_with(prefix)).collect();
        let mut copied = 0;
        for id in ids {
            let name = store.name(id).to_string();
            match self.find(&name) {
                Some(t) => {
                    if t.shape() != store.value(id).shape() {
                        return Err(CheckpointError::ShapeMismatch {
                            name,
                            found: t.shape().to_vec(),
                            expected: store.value(id).shape().to_vec(),
                        });
                    }
                    *store.value_mut(id) = t.cast();
                    copied += 1;
                }
                None if strict => return Err(CheckpointError::Missing(name)),
                None => {}
            }
        }
        Ok(copied)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(self.spec_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.spec_json.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.optimizer.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.optimizer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(CKPT_MAGIC.as_slice()) {
            return Err(CheckpointError::BadMagic);
        }
        let json_len = r.u64()? as usize;
        let spec_json = String::from_utf8(r.take(json_len)?.to_vec()).map_err(|_| CheckpointError::Utf8)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| CheckpointError::Utf8)?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated(r.pos))?;
            params.push((name, t));
        }
        let blob_len = r.u64()? as usize;
        let optimizer = r.take(blob_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self {
            spec_json,
            params,
            optimizer,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
