//! `.pbw` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PBWEIGHT"            8-byte magic
//! header_len: u64
//! header: JSON          {"format_version", "spec", "vocab", "tensors": [{name, rows, cols, offset}]}
//! payload               f32 values, row-major per tensor, `offset` counted from payload start
//! crc32: u32            CRC-32 (IEEE) of the payload bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;

pub const PBW_MAGIC: &[u8; 8] = b"PBWEIGHT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    pub tensors: Vec<TensorEntry>,
}

pub(crate) fn encode(
    spec: Option<ModelSpec>,
    vocab: Option<Vec<String>>,
    tensors: &[(String, &Matrix)],
) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset: payload.len(),
        });
        for &v in m.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = ContainerHeader {
        format_version: FORMAT_VERSION,
        spec,
        vocab,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 8 + header_json.len() + payload.len() + 4);
    out.extend_from_slice(PBW_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize) -> std::result::Result<&'a [u8], FormatError> {
    bytes.get(at..at + len).ok_or(FormatError::Truncated {
        needed: at + len,
        available: bytes.len(),
    })
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ContainerHeader, BTreeMap<String, Matrix>)> {
    let magic = take(bytes, 0, 8)?;
    if magic != PBW_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(PBW_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }
        .into());
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().unwrap()) as usize;
    let header_bytes = take(bytes, 16, header_len)?;
    let header: ContainerHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(FormatError::Header(format!(
            "unsupported format version {}",
            header.format_version
        ))
        .into());
    }
    let payload_start = 16 + header_len;
    let payload_len = header
        .tensors
        .iter()
        .map(|t| t.offset + 4 * t.rows * t.cols)
        .max()
        .unwrap_or(0);
    let payload = take(bytes, payload_start, payload_len)?;
    let crc_bytes = take(bytes, payload_start + payload_len, 4)?;
    if bytes.len() != payload_start + payload_len + 4 {
        return Err(FormatError::Header(format!(
            "{} trailing bytes after checksum",
            bytes.len() - (payload_start + payload_len + 4)
        ))
        .into());
    }
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let raw = &payload[entry.offset..entry.offset + 4 * entry.rows * entry.cols];
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(entry.name.clone()).into());
        }
        let m = Matrix::new(entry.rows, entry.cols, data)?;
        if tensors.insert(entry.name.clone(), m).is_some() {
            return Err(FormatError::Header(format!("duplicate tensor `{}`", entry.name)).into());
        }
    }
    Ok((header, tensors))
}

/// Reads any `.pbw` container without model-level validation (used for
/// metric dumps and inspection).
pub fn read_container(path: &Path) -> Result<(ContainerHeader, BTreeMap<String, Matrix>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Container(source) => Error::Format {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn write_container(
    path: &Path,
    spec: Option<ModelSpec>,
    tensors: &[(String, &Matrix)],
) -> Result<()> {
    std::fs::write(path, container_bytes(spec, tensors)).map_err(|e| Error::io(path, e))
}

/// Encodes a bare tensor container (no vocabulary).
pub fn container_bytes(spec: Option<ModelSpec>, tensors: &[(String, &Matrix)]) -> Vec<u8> {
    encode(spec, None, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.5]]);
        let b = Matrix::from_rows(&[[-1.25]]);
        let bytes = encode(None, None, &[("a".into(), &a), ("b".into(), &b)]);
        let (header, tensors) = decode(&bytes).unwrap();
        assert_eq!(header.tensors.len(), 2);
        assert_eq!(tensors["a"], a);
        assert_eq!(tensors["b"], b);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Container(FormatError::BadMagic { .. }))));

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 6] ^= 0x01;
        assert!(matches!(decode(&flipped), Err(Error::Container(FormatError::Checksum { .. }))));

        assert!(matches!(
            decode(&bytes[..bytes.len() - 9]),
            Err(Error::Container(FormatError::Truncated { .. }))
        ));
    }
}
