//! Binary weight file.
//!
//! ```text
//! "MUNT" | version: u32 | config: 16 × u32 | params: f64 × n | checksum: u64
//! ```
//!
//! Integers and reals are little-endian. The checksum is the first eight
//! bytes (read as little-endian) of SHA-256 over everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::params::ParamStore;

use super::config::ModelConfig;
use super::network::MambaUnet;

pub const MAGIC: &[u8; 4] = b"MUNT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 4 * ModelConfig::WORDS;
pub const CHECKSUM_BYTES: usize = 8;

/// Exact size of a weight file for `cfg`.
pub fn expected_file_size(cfg: &ModelConfig) -> Result<usize> {
    let n = MambaUnet::new(cfg.clone())?.layout().total_numel();
    Ok(HEADER_BYTES + 8 * n + CHECKSUM_BYTES)
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn encode_weights(model: &MambaUnet, weights: &ParamStore) -> Result<Vec<u8>> {
    let layout = model.layout();
    if weights.len() != layout.len() {
        return Err(Error::WeightFile(format!(
            "{} tensors for {} parameters",
            weights.len(),
            layout.len()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_BYTES + 8 * layout.total_numel() + CHECKSUM_BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for w in model.config().to_words() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for (v, spec) in weights.iter().zip(layout.specs()) {
        if v.shape() != spec.shape.as_slice() {
            return Err(Error::WeightFile(format!("{} has shape {:?}", spec.name, v.shape())));
        }
        for x in v.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(MambaUnet, ParamStore)> {
    let bad = |m: String| Error::WeightFile(m);
    if bytes.len() < HEADER_BYTES + CHECKSUM_BYTES {
        return Err(bad(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_BYTES);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(bad("checksum mismatch".into()));
    }
    let words: Vec<u32> = (0..ModelConfig::WORDS).map(|k| word(8 + 4 * k)).collect();
    let cfg = ModelConfig::from_words(&words)?;
    let model = MambaUnet::new(cfg).map_err(|e| bad(e.to_string()))?;
    let expected = HEADER_BYTES + 8 * model.layout().total_numel() + CHECKSUM_BYTES;
    if bytes.len() != expected {
        return Err(bad(format!("size {} does not match config ({expected})", bytes.len())));
    }

    let mut off = HEADER_BYTES;
    let mut values = Vec::with_capacity(model.layout().len());
    for spec in model.layout().specs() {
        let n = spec.numel();
        let data: Vec<f64> = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += 8 * n;
        values.push(Array::new(spec.shape.clone(), data).map_err(|_| bad(format!("{} is not finite", spec.name)))?);
    }
    let store = ParamStore::from_values(model.layout(), values)?;
    Ok((model, store))
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path` once complete.
pub fn save_weights(model: &MambaUnet, weights: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(model, weights)?)
}

pub fn load_weights(path: &Path) -> Result<(MambaUnet, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
