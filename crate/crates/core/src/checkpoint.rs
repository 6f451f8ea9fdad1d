//! Checkpoint files.
//!
//! Body layout inside the shared container (magic `XMALIGN-CKPT`):
//!
//! ```text
//! epoch u64 | config_hash u64 | embedding_dim u32 | head_mode u8 (0 shared, 1 separate)
//! tensor_count u32 | { name str | rows u32 | cols u32 | values f64[rows*cols] }*
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8; `f64[]` is a u32 count
//! followed by little-endian IEEE-754 values, so encoding is lossless.

use std::fs;
use std::path::Path;

use crate::codec::{self, FileError, Reader, Writer};
use crate::error::Error;
use crate::model::{HeadMode, ModelState};
use crate::numerics::Matrix;

const CKPT_MAGIC: &[u8; codec::MAGIC_LEN] = b"XMALIGN-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub model: ModelState,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.epoch);
        w.u64(self.config_hash);
        w.u32(self.model.embedding_dim() as u32);
        w.u8(match self.model.head.mode() {
            HeadMode::Shared => 0,
            HeadMode::Separate => 1,
        });
        let tensors = self.model.tensors();
        w.u32(tensors.len() as u32);
        for (name, m) in tensors {
            w.str(&name);
            w.u32(m.rows() as u32);
            w.u32(m.cols() as u32);
            w.f64s(m.data());
        }
        codec::seal(CKPT_MAGIC, CHECKPOINT_VERSION, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FileError> {
        let body = codec::open(bytes, CKPT_MAGIC, CHECKPOINT_VERSION)?;
        let mut r = Reader::new(body);
        let epoch = r.u64()?;
        let config_hash = r.u64()?;
        let embedding_dim = r.u32()? as usize;
        let head_mode = match r.u8()? {
            0 => HeadMode::Shared,
            1 => HeadMode::Separate,
            v => return Err(FileError::format(format!("bad head mode code {v}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.str()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let values = r.f64s()?;
            tensors.push((name, Matrix::new(rows, cols, values)?));
        }
        r.finish()?;
        let model = ModelState::from_named_tensors(tensors)?;
        if model.embedding_dim() != embedding_dim || model.head.mode() != head_mode {
            return Err(FileError::Content(Error::Validation(
                "checkpoint header disagrees with its tensors".into(),
            )));
        }
        Ok(Self {
            epoch,
            model,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FileError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FileError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
