//! Shared binary envelope.
//!
//! ```text
//! [8 bytes magic][u32 LE header length][UTF-8 JSON header][payload ...]
//! ```
//!
//! The dataset format stores its payload as f32 records; checkpoints store
//! length-prefixed f64 blocks (`u32 LE count` then `count` LE f64 values).

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, FormatError, Result};

pub const MAGIC_LEN: usize = 8;

pub(crate) fn encode_envelope<H: Serialize>(magic: &[u8; MAGIC_LEN], header: &H) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC_LEN + 4 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub(crate) fn push_f64_block(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte slice that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> std::result::Result<f32, FormatError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f64_block(&mut self, expected: Option<usize>) -> std::result::Result<Vec<f64>, FormatError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if let Some(e) = expected {
            if e != n {
                return Err(FormatError::DimensionMismatch {
                    offset: at,
                    detail: format!("block declares {n} values, expected {e}"),
                });
            }
        }
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    /// Magic and JSON header. The magic's trailing digits are its version;
    /// a differing stem is a bad magic, differing digits a version mismatch.
    pub(crate) fn envelope<H: DeserializeOwned>(
        &mut self,
        expected: &[u8; MAGIC_LEN],
    ) -> std::result::Result<H, FormatError> {
        let stem = expected.iter().rposition(|b| !b.is_ascii_digit()).map_or(0, |i| i + 1);
        let magic = self.take(MAGIC_LEN)?;
        if magic[..stem] != expected[..stem] {
            return Err(FormatError::BadMagic {
                offset: 0,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        if magic[stem..] != expected[stem..] {
            let want = std::str::from_utf8(&expected[stem..]).ok().and_then(|d| d.parse().ok()).unwrap_or(0);
            return Err(FormatError::VersionMismatch {
                offset: stem,
                expected: want,
                found: String::from_utf8_lossy(&magic[stem..]).into_owned(),
            });
        }
        let len = self.u32()? as usize;
        let at = self.pos;
        let json = self.take(len)?;
        serde_json::from_slice(json).map_err(|e| FormatError::Header {
            offset: at,
            detail: e.to_string(),
        })
    }

    pub(crate) fn finish(&self) -> std::result::Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::TrailingBytes {
                offset: self.pos,
                count: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Short hex digest used to tag artifacts with the configuration they came from.
pub fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    hex::encode(&d[..8])
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::from)
}
