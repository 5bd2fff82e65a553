//! NPNT tensor container.
//!
//! Layout: the magic bytes `NPNT`, a `u32` little-endian header length, a
//! UTF-8 JSON header, then the raw little-endian `f64` payload. The header
//! is `{"dtype":"f64","shape":[...],"order":"row-major","sha256":"..."}`;
//! `sha256` covers the payload bytes and is optional on read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const MAGIC: &[u8; 4] = b"NPNT";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha256: Option<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut payload = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = Header {
        dtype: "f64".into(),
        shape: t.shape().to_vec(),
        order: "row-major".into(),
        sha256: Some(hex(&Sha256::digest(&payload))),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let corrupt = |offset: usize, detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 8 {
        return Err(corrupt(0, format!("file is {} bytes, shorter than the fixed preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(4, format!("header length {hlen} runs past end of file ({} bytes)", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| corrupt(8, format!("header is not valid JSON: {e}")))?;
    if header.dtype != "f64" {
        return Err(corrupt(8, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(corrupt(8, format!("unsupported order {:?}", header.order)));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| corrupt(8, "shape overflows".into()))?;
    let payload = &bytes[end..];
    if payload.len() != count * 8 {
        return Err(corrupt(
            end,
            format!("payload is {} bytes, shape {:?} needs {}", payload.len(), header.shape, count * 8),
        ));
    }
    if let Some(expected) = &header.sha256 {
        let actual = hex(&Sha256::digest(payload));
        if &actual != expected {
            return Err(corrupt(end, "payload checksum mismatch".into()));
        }
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_external(header.shape, data).map_err(|e| corrupt(end, e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
