use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{MlpSpec, ParamEntry, ParamVector};
use crate::error::{DbosError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// First line of a checkpoint file. The raw parameters follow the newline as
/// little-endian `f64` values in registry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub specs: BTreeMap<String, MlpSpec>,
    pub registry: Vec<ParamEntry>,
    pub total_len: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl CheckpointHeader {
    pub fn new(kind: impl Into<String>, seed: u64, params: &ParamVector) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: kind.into(),
            seed,
            specs: BTreeMap::new(),
            registry: params.registry().to_vec(),
            total_len: params.len(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_spec(mut self, name: impl Into<String>, spec: MlpSpec) -> Self {
        self.specs.insert(name.into(), spec);
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DbosError::Checkpoint(format!("missing meta key `{key}`")))
    }

    pub fn spec(&self, name: &str) -> Result<MlpSpec> {
        self.specs
            .get(name)
            .copied()
            .ok_or_else(|| DbosError::Checkpoint(format!("missing spec `{name}`")))
    }
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamVector) -> Result<()> {
    if header.total_len != params.len() || header.registry != params.registry() {
        return Err(DbosError::Checkpoint(
            "header registry does not describe the parameters".into(),
        ));
    }
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.reserve(params.len() * 8);
    for v in params.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamVector)> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| DbosError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(DbosError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.total_len * 8 {
        return Err(DbosError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.total_len * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = ParamVector::from_parts(header.registry.clone(), data)?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = MlpSpec::new(2, 3, 1, 1).unwrap();
        let mut p = ParamVector::new();
        spec.register(&mut p, "").unwrap();
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64).sin() * 1e-3 + f64::EPSILON;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let header = CheckpointHeader::new("test", 7, &p)
            .with_spec("net", spec)
            .with_meta("env", "coingame");
        save_checkpoint(&path, &header, &p).unwrap();
        let (h2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2, p);
        assert_eq!(h2.meta("env").unwrap(), "coingame");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut p = ParamVector::new();
        p.register("w", &[4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&path, &CheckpointHeader::new("t", 0, &p), &p).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DbosError::Checkpoint(_))));
    }
}
