//! Single-file container for named f32 tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes
//! version      u32
//! digest       32 bytes   (configuration digest; zero when unused)
//! header_len   u64
//! header       JSON: {"meta": ..., "tensors": [{"name", "shape"}, ...]}
//! blobs        f32 data of every tensor, in header order
//! checksum     32 bytes   SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MmsError, Result};
use crate::nn::Tensor;

pub const DIGEST_LEN: usize = 32;
const FIXED_PREFIX: usize = 8 + 4 + DIGEST_LEN + 8;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Decoded container contents.
#[derive(Debug)]
pub struct Container {
    pub version: u32,
    pub digest: [u8; DIGEST_LEN],
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn sha256(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    let mut out = [0u8; DIGEST_LEN];
    out.copy_from_slice(&Sha256::digest(bytes));
    out
}

pub fn encode(
    magic: &[u8; 8],
    version: u32,
    digest: &[u8; DIGEST_LEN],
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<Vec<u8>> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let blob_len: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(FIXED_PREFIX + header.len() + blob_len + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = sha256(&out);
    out.extend_from_slice(&checksum);
    Ok(out)
}

pub fn decode(bytes: &[u8], magic: &[u8; 8], path: &Path) -> Result<Container> {
    let integrity = |reason: &str| MmsError::Integrity {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < FIXED_PREFIX + DIGEST_LEN {
        return Err(integrity("file is truncated"));
    }
    if &bytes[..8] != magic {
        return Err(integrity("bad magic header"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if sha256(body) != checksum {
        return Err(integrity("checksum mismatch (truncated or corrupted)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    let mut digest = [0u8; DIGEST_LEN];
    digest.copy_from_slice(&body[12..12 + DIGEST_LEN]);
    let header_len =
        u64::from_le_bytes(body[12 + DIGEST_LEN..FIXED_PREFIX].try_into().expect("8 bytes")) as usize;
    let header_end = FIXED_PREFIX
        .checked_add(header_len)
        .filter(|end| *end <= body.len())
        .ok_or_else(|| integrity("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[FIXED_PREFIX..header_end])
        .map_err(|e| integrity(&format!("unreadable header: {e}")))?;

    let mut cursor = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = cursor
            .checked_add(n * 4)
            .filter(|end| *end <= body.len())
            .ok_or_else(|| integrity(&format!("blob of `{}` runs past the end", entry.name)))?;
        let data = body[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
        cursor = end;
    }
    if cursor != body.len() {
        return Err(integrity("trailing bytes after the last blob"));
    }
    Ok(Container {
        version,
        digest,
        meta: header.meta,
        tensors,
    })
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| MmsError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| MmsError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| MmsError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| MmsError::io(path, e))?;
    tmp.persist(path).map_err(|e| MmsError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let b = Tensor::from_vec(&[3], vec![7.0, 8.0, 9.0]).unwrap();
        encode(
            b"TESTCONT",
            3,
            &[9u8; DIGEST_LEN],
            serde_json::json!({"k": 1}),
            &[("a", &a), ("b", &b)],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip() {
        let c = decode(&sample(), b"TESTCONT", Path::new("x")).unwrap();
        assert_eq!(c.version, 3);
        assert_eq!(c.digest, [9u8; DIGEST_LEN]);
        assert_eq!(c.meta["k"], 1);
        assert_eq!(c.tensors[0].0, "a");
        assert_eq!(c.tensors[0].1.data(), &[1.0, -2.0, 3.5, 0.25]);
        assert_eq!(c.tensors[1].1.shape(), &[3]);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = sample();
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(matches!(
                decode(&bad, b"TESTCONT", Path::new("x")),
                Err(MmsError::Integrity { .. })
            ));
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut], b"TESTCONT", Path::new("x")),
                Err(MmsError::Integrity { .. })
            ));
        }
    }
}
