//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header (operator config, parameter names and shapes, free-form metadata),
//! then every parameter as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_operator, Operator, OperatorConfig, StepOperator};
use crate::error::{Error, Result};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CONSVCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Precision the parameters were trained in.
    pub precision: Precision,
    pub config: OperatorConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), reason)
}

pub fn save_checkpoint<T: Real>(path: &Path, op: &dyn StepOperator<T>, metadata: serde_json::Value) -> Result<()> {
    let store = op.params();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        precision: T::PRECISION,
        config: op.config().clone(),
        params: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header).map_err(|e| fmt_err(path, e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for t in store.tensors() {
        for v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt_err(path, "not a checkpoint (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(path, format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    serde_json::from_slice(&json).map_err(|e| fmt_err(path, format!("header: {e}")))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(file), path)
}

/// Rebuilds the operator described by the checkpoint in precision `T`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Operator<T>, CheckpointHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    let mut op = build_operator::<T>(&header.config, 0)?;
    let store = op.params_mut();
    if store.len() != header.params.len() {
        return Err(fmt_err(
            path,
            format!("{} parameters stored, architecture has {}", header.params.len(), store.len()),
        ));
    }
    for (i, entry) in header.params.iter().enumerate() {
        if store.names()[i] != entry.name || store.get(i).shape() != entry.shape.as_slice() {
            return Err(fmt_err(
                path,
                format!("parameter {} {:?} does not match the architecture", entry.name, entry.shape),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let data: Vec<T> = bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        *store.get_mut(i) = Tensor::from_vec(&entry.shape, data)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(fmt_err(path, format!("{} trailing bytes", rest.len())));
    }
    Ok((op, header))
}
