//! Versioned binary container shared by checkpoint and dataset files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic (12 bytes) | version u32 | body length u64 | body | SHA-256(all preceding bytes)
//! ```

use std::fmt;
use std::io;

use sha2::{Digest, Sha256};

/// File-level failures, kept distinct so callers can map them to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error(transparent)]
    Content(#[from] crate::error::Error),
}

impl FileError {
    pub(crate) fn format(msg: impl fmt::Display) -> Self {
        FileError::Format(msg.to_string())
    }
}

pub const MAGIC_LEN: usize = 12;
const HEADER_LEN: usize = MAGIC_LEN + 4 + 8;
const DIGEST_LEN: usize = 32;

pub(crate) fn seal(magic: &[u8; MAGIC_LEN], version: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Verifies the envelope and returns the body.
pub(crate) fn open<'a>(
    bytes: &'a [u8],
    magic: &[u8; MAGIC_LEN],
    version: u32,
) -> Result<&'a [u8], FileError> {
    if bytes.len() < MAGIC_LEN || &bytes[..MAGIC_LEN] != magic {
        return Err(FileError::format(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FileError::Checksum);
    }
    let found = u32::from_le_bytes(bytes[MAGIC_LEN..MAGIC_LEN + 4].try_into().unwrap());
    if found != version {
        return Err(FileError::Version {
            found,
            expected: version,
        });
    }
    let body_len = u64::from_le_bytes(bytes[MAGIC_LEN + 4..HEADER_LEN].try_into().unwrap());
    let expected_len = (HEADER_LEN as u64)
        .checked_add(body_len)
        .and_then(|n| n.checked_add(DIGEST_LEN as u64));
    if expected_len != Some(bytes.len() as u64) {
        return Err(FileError::Checksum);
    }
    let split = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..split]);
    if digest.as_slice() != &bytes[split..] {
        return Err(FileError::Checksum);
    }
    Ok(&bytes[HEADER_LEN..split])
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// First eight digest bytes of SHA-256 as an integer.
pub fn sha256_u64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, values: &[f64]) {
        self.u32(values.len() as u32);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FileError> {
        if self.buf.len() < n {
            return Err(FileError::format("unexpected end of body"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, FileError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, FileError> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FileError::format("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String, FileError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FileError::format("invalid UTF-8"))
    }

    pub fn finish(self) -> Result<(), FileError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(FileError::format("trailing bytes after body"))
        }
    }
}
