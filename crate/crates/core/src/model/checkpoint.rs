//! Checkpoint format: one line of JSON header, then the parameter buffer as
//! little-endian `f32` in layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    /// Seeds that produced these weights (init, training shuffle, ...).
    seeds: Vec<u64>,
    tensors: Vec<TensorEntry>,
    values: usize,
    sha256: String,
}

pub fn save_params(params: &ModelParams<f32>, seeds: &[u64], path: &Path) -> Result<()> {
    let blob = crate::record::f32_le_bytes(params.data.iter().copied());
    let header = Header {
        format: "sleep-events-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        seeds: seeds.to_vec(),
        tensors: params
            .layout
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        values: params.data.len(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, returning the parameters and their seed lineage.
/// When `expected` is given the stored configuration must equal it.
pub fn load_params(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParams<f32>, Vec<u64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Invalid(format!("{}: corrupt checkpoint (no header)", path.display())))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::json(format!("{} header", path.display()), e))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Mismatch(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if let Some(exp) = expected {
        if *exp != header.config {
            return Err(Error::Mismatch(format!(
                "checkpoint config (D={}, assembly {}) differs from expected (D={}, assembly {})",
                header.config.channels, header.config.assembly, exp.channels, exp.assembly
            )));
        }
    }
    let blob = &bytes[split + 1..];
    if blob.len() != header.values * 4 || hex::encode(Sha256::digest(blob)) != header.sha256 {
        return Err(Error::Invalid(format!("{}: corrupt checkpoint payload", path.display())));
    }
    let mut params = ModelParams::<f32>::zeros(&header.config)?;
    if params.data.len() != header.values {
        return Err(Error::Mismatch("checkpoint size disagrees with its config".into()));
    }
    for (dst, chunk) in params.data.iter_mut().zip(blob.chunks_exact(4)) {
        *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok((params, header.seeds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Assembly;
    use crate::model::{forward, init_params};

    #[test]
    fn round_trip_and_mismatch() {
        let mut cfg = ModelConfig::new(2, Assembly::SR);
        cfg.input_len = 600;
        cfg.segments = 2;
        cfg.filters = vec![2, 4, 8];
        let p = init_params::<f32>(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_params(&p, &[4, 9], &path).unwrap();
        let (q, seeds) = load_params(&path, Some(&cfg)).unwrap();
        assert_eq!(seeds, vec![4, 9]);
        assert_eq!(p.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   q.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let x: Vec<f32> = (0..1200).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(forward(&p, &x).unwrap(), forward(&q, &x).unwrap());

        let mut wrong = cfg.clone();
        wrong.channels = 3;
        assert!(matches!(load_params(&path, Some(&wrong)), Err(Error::Mismatch(_))));

        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(load_params(&path, None).is_err());
        fs::write(&path, b"garbage").unwrap();
        assert!(load_params(&path, None).is_err());
    }
}
