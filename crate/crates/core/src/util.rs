//! Small shared helpers: checksums and binary tensor i/o.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// 8-byte checksum: the first 8 bytes of SHA-256 of the payload.
pub fn checksum8(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

/// Write `payload` followed by its 8-byte checksum.
pub fn write_checksummed(path: &Path, payload: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(payload).map_err(|e| Error::io(path, e))?;
    file.write_all(&checksum8(payload))
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a file written by [`write_checksummed`], verifying the trailing checksum.
pub fn read_checksummed(path: &Path) -> Result<Vec<u8>> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound { path: path.into() }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Malformed {
            path: path.into(),
            reason: "shorter than its checksum".into(),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    if checksum8(payload) != tail {
        return Err(Error::ChecksumMismatch { path: path.into() });
    }
    bytes.truncate(bytes.len() - 8);
    Ok(bytes)
}

/// Encode a `f32` slice as little-endian bytes.
pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode little-endian bytes into `f32`s.
pub fn f32_from_le_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("payload length {} not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
