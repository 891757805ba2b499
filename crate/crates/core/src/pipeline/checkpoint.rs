//! Checkpoint files.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "LIDC" | version | meta length | meta (canonical JSON)
//! tensor count | per tensor: name length | name | ndim | dims… | f64 values…
//! ```
//!
//! Tensors are written in name order. Entries named `*.running_mean` or
//! `*.running_var` are restored as non-trainable buffers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, StageId};
use crate::autodiff::Tensor;
use crate::frontend::FrontendConfig;
use crate::models::ModelConfig;
use crate::nn::ParamStore;
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 4] = b"LIDC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: StageId,
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub vocab_hash: String,
    /// Content hash of the frozen network this stage read features from.
    pub upstream_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * self.params.param_count());
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION as usize);
        put(&mut out, meta.len());
        out.extend_from_slice(&meta);
        put(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.rank());
            for &d in t.shape() {
                put(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::IncompatibleCheckpoint("missing LIDC magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::IncompatibleCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect();
            let trainable = !is_buffer(&name);
            params.insert(name, Tensor::new(&shape, data, trainable)?)?;
        }
        if r.at != bytes.len() {
            return Err(Error::IncompatibleCheckpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Writes atomically: a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_stage(&self, stage: StageId) -> Result<()> {
        if self.meta.stage != stage {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {stage:?} checkpoint, found {:?}",
                self.meta.stage
            )));
        }
        Ok(())
    }

    pub fn expect_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.meta.vocab_hash != vocab_hash {
            return Err(Error::IncompatibleCheckpoint(
                "phoneme vocabulary differs from the one the checkpoint was trained with".into(),
            ));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::IncompatibleCheckpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
