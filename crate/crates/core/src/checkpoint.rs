//! Checkpoint files: a versioned text manifest of named parameter shapes
//! followed by the concatenated little-endian f64 payloads.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &str = "VDOC-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Bad(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

pub fn save(path: &Path, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    let mut header = format!("{MAGIC}\n{}\n", params.len());
    for (name, t) in params {
        header.push_str(name);
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push_str("DATA\n");
    f.write_all(header.as_bytes())?;
    for (_, t) in params {
        for v in t.data().iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads parameter values into an already-initialized model's tensors.
/// Names, order, and shapes must match exactly.
pub fn load_into(path: &Path, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let data_tag = b"DATA\n";
    let split = raw
        .windows(data_tag.len())
        .position(|w| w == data_tag)
        .ok_or_else(|| CheckpointError::Bad("missing DATA marker".into()))?;
    let header = std::str::from_utf8(&raw[..split])
        .map_err(|_| CheckpointError::Bad("manifest is not utf-8".into()))?;
    let payload = &raw[split + data_tag.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CheckpointError::Bad(format!("expected `{MAGIC}` header")));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| CheckpointError::Bad("bad parameter count".into()))?;
    if count != params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{count} entries in file, model has {}",
            params.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| CheckpointError::Bad("truncated manifest".into()))?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| CheckpointError::Bad("empty manifest line".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|_| CheckpointError::Bad(format!("bad dim in `{line}`")))
            })
            .collect::<Result<_, _>>()?;
        entries.push((name, shape));
    }

    let total: usize = entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(CheckpointError::Bad(format!(
            "payload is {} bytes, manifest describes {}",
            payload.len(),
            total * 8
        )));
    }
    let mut offset = 0;
    for ((name, shape), (want_name, t)) in entries.iter().zip(params) {
        if name != want_name || *shape != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "file has {name} {shape:?}, model expects {want_name} {:?}",
                t.shape()
            )));
        }
        let n = t.numel();
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let b = &payload[offset + i * 8..offset + i * 8 + 8];
                f64::from_le_bytes(b.try_into().unwrap())
            })
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Bad(format!("non-finite value in {name}")));
        }
        t.set_data(values);
        offset += n * 8;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelState};

    #[test]
    fn round_trip_restores_all_parameters() {
        let cfg = ModelConfig::micro(50, 3);
        let a = ModelState::init(cfg.clone(), 11).unwrap();
        let b = ModelState::init(cfg, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &a.params()).unwrap();
        load_into(&path, &b.params()).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(*ta.data(), *tb.data(), "mismatch in {na}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = ModelState::init(ModelConfig::micro(50, 3), 1).unwrap();
        let b = ModelState::init(ModelConfig::micro(52, 3), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &a.params()).unwrap();
        assert!(matches!(
            load_into(&path, &b.params()),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn truncated_and_garbage_files_are_rejected() {
        let a = ModelState::init(ModelConfig::micro(50, 3), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &a.params()).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw.truncate(raw.len() - 16);
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(
            load_into(&path, &a.params()),
            Err(CheckpointError::Bad(_))
        ));
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_into(&path, &a.params()).is_err());
    }
}
