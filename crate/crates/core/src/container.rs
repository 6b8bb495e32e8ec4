//! Framed binary container shared by dataset files and model checkpoints.
//!
//! ```text
//! magic        8 bytes   e.g. "DNEBDS01"
//! header_len   u32 LE    byte length of the JSON header
//! header       UTF-8 JSON
//! payload      raw little-endian blobs; the header records offsets relative
//!              to the first payload byte
//! crc32        u32 LE    CRC-32 (IEEE) of every preceding byte
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 12;
const TRAILER_LEN: usize = 4;

/// Location of one blob inside the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: usize,
    pub len: usize,
}

pub fn encode(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + TRAILER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Splits a container into `(header, payload)` after checking magic and checksum.
pub fn decode<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < magic.len() {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: "file shorter than the magic tag".into(),
        });
    }
    if &bytes[..8] != magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    if bytes.len() < PREFIX_LEN + TRAILER_LEN {
        return Err(Error::Checksum {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let body_end = bytes.len() - TRAILER_LEN;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if PREFIX_LEN + header_len > body_end {
        return Err(Error::Parse {
            offset: 8,
            message: format!("header length {header_len} runs past the end of the file"),
        });
    }
    let header = &bytes[PREFIX_LEN..PREFIX_LEN + header_len];
    let payload = &bytes[PREFIX_LEN + header_len..body_end];
    Ok((header, payload))
}

pub fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::ContainerVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Appends blobs to a payload while tracking their offsets.
#[derive(Debug, Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn push_f32(&mut self, values: &[f32]) -> BlobRef {
        let offset = self.buf.len();
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            offset,
            len: self.buf.len() - offset,
        }
    }

    pub fn push_f64(&mut self, values: &[f64]) -> BlobRef {
        let offset = self.buf.len();
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            offset,
            len: self.buf.len() - offset,
        }
    }

    pub fn push_i32(&mut self, values: impl IntoIterator<Item = i32>) -> BlobRef {
        let offset = self.buf.len();
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            offset,
            len: self.buf.len() - offset,
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Resolves a blob against the payload; `base` is the payload's absolute file
/// offset, used only for error reporting.
pub fn blob(payload: &[u8], r: BlobRef, base: usize, elem: usize) -> Result<&[u8]> {
    let end = r.offset.checked_add(r.len).filter(|&e| e <= payload.len());
    match end {
        Some(end) if r.len.is_multiple_of(elem) => Ok(&payload[r.offset..end]),
        _ => Err(Error::Parse {
            offset: base + r.offset,
            message: format!("blob of {} bytes does not fit the payload", r.len),
        }),
    }
}

pub fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn read_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub fn read_i32(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn payload_base(header_len: usize) -> usize {
    PREFIX_LEN + header_len
}
