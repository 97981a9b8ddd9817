//! Shared on-disk container: 8-byte magic, little-endian `u64` header length,
//! a pretty-printed JSON header, then raw little-endian payload bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 8] = b"DGBUNDLE";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGPARAMS";
pub const DUMP_MAGIC: &[u8; 8] = b"DGTENSOR";

const MAX_HEADER: u64 = 64 << 20;

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let text = serde_json::to_string_pretty(header)?;
    let mut out = Vec::with_capacity(16 + text.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[u8]) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a container into its parsed header and the payload bytes.
pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(Error::MalformedHeader("file shorter than container preamble".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER || 16 + len as usize > bytes.len() {
        return Err(Error::MalformedHeader(format!("header length {len} exceeds file")));
    }
    let text = std::str::from_utf8(&bytes[16..16 + len as usize])
        .map_err(|e| Error::MalformedHeader(format!("header is not utf-8: {e}")))?;
    let header: H = serde_json::from_str(text)
        .map_err(|e| Error::MalformedHeader(format!("header does not parse: {e}")))?;
    Ok((header, bytes[16 + len as usize..].to_vec()))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

pub fn push_f32(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn push_f64(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential reader over a payload, checking each declared tensor length.
pub struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, name: &str, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::ByteLengthMismatch {
                name: name.to_string(),
                expected: n,
                found: remaining,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn f32s(&mut self, name: &str, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(name, count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, name: &str, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(name, count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Fails if bytes remain after all declared tensors were consumed.
    pub fn finish(self) -> Result<()> {
        let extra = self.bytes.len() - self.pos;
        if extra != 0 {
            return Err(Error::ByteLengthMismatch {
                name: "<trailing>".into(),
                expected: 0,
                found: extra,
            });
        }
        Ok(())
    }
}
