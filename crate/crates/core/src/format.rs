//! Manifest-plus-blob container shared by weight files and relay-cache files.
//!
//! Layout:
//!
//! ```text
//! [u64 little-endian: manifest length in bytes]
//! [manifest: UTF-8 JSON]
//! [blob: little-endian f32 values, row-major, tensors back to back]
//! ```
//!
//! Each tensor record in the manifest carries its name, shape and byte offset
//! into the blob. The optional `checksum` is `sha256:<hex>` over the blob.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RelayError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Format-specific metadata (model spec, cache header, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
    pub blob_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

pub fn blob_checksum(blob: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(blob)))
}

pub fn encode(
    format: &str,
    version: u32,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
    with_checksum: bool,
) -> Result<Vec<u8>> {
    let total: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let mut blob = Vec::with_capacity(total);
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: format.to_string(),
        version,
        meta,
        tensors: records,
        blob_bytes: blob.len() as u64,
        checksum: with_checksum.then(|| blob_checksum(&blob)),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parsed container: manifest plus tensors in manifest order.
#[derive(Debug)]
pub struct Decoded {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Decoded {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| RelayError::Format(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.swap_remove(idx).1)
    }
}

pub fn decode(
    bytes: &[u8],
    format: &str,
    version: u32,
    require_checksum: bool,
) -> Result<Decoded> {
    if bytes.len() < 8 {
        return Err(RelayError::Format("file shorter than the length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| RelayError::Format("manifest length exceeds file size".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[8..header_end])?;
    if manifest.format != format {
        return Err(RelayError::Format(format!(
            "expected format `{format}`, found `{}`",
            manifest.format
        )));
    }
    if manifest.version != version {
        return Err(RelayError::VersionMismatch {
            found: manifest.version,
            expected: version,
        });
    }
    let blob = &bytes[header_end..];
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(RelayError::Format(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    match &manifest.checksum {
        Some(expected) => {
            let actual = blob_checksum(blob);
            if &actual != expected {
                return Err(RelayError::ChecksumMismatch {
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        None if require_checksum => {
            return Err(RelayError::Format("manifest has no checksum".into()));
        }
        None => {}
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let n: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start
            .checked_add(n * 4)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| {
                RelayError::Format(format!("tensor `{}` runs past the end of the blob", rec.name))
            })?;
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((rec.name.clone(), Tensor::new(rec.shape.clone(), data)?));
    }
    Ok(Decoded { manifest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::from_rows(2, 2, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        encode(
            "test",
            1,
            serde_json::json!({"k": 1}),
            &[("a".into(), &a), ("b".into(), &b)],
            true,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut d = decode(&sample(), "test", 1, true).unwrap();
        let a = d.take("a").unwrap();
        assert_eq!(a.data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(a.data()[2], f32::MIN_POSITIVE);
        assert_eq!(d.take("b").unwrap().data(), &[0.1, 0.2, 0.3]);
        assert_eq!(d.manifest.meta["k"], 1);
    }

    #[test]
    fn truncated_blob_rejected() {
        let bytes = sample();
        let err = decode(&bytes[..bytes.len() - 4], "test", 1, true).unwrap_err();
        assert!(matches!(err, RelayError::Format(_)), "{err}");
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let mut bytes = sample();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            decode(&bytes, "test", 1, true),
            Err(RelayError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn version_and_format_checked() {
        let bytes = sample();
        assert!(matches!(
            decode(&bytes, "test", 2, true),
            Err(RelayError::VersionMismatch { found: 1, expected: 2 })
        ));
        assert!(matches!(decode(&bytes, "other", 1, true), Err(RelayError::Format(_))));
    }
}
