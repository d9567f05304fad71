//! `ARCKD1\n`, one JSON manifest line, then every parameter as little-endian f64 in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpochLog;
use crate::branchnet::{BranchKind, BranchModel, ModelConfig};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"ARCKD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub branches: Vec<BranchModel>,
    /// Snapshot of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    epoch: usize,
    config: serde_json::Value,
    history: Vec<EpochLog>,
    branches: Vec<BranchEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchEntry {
    kind: BranchKind,
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(branches: Vec<BranchModel>, config: serde_json::Value, epoch: usize, history: Vec<EpochLog>) -> Self {
        Checkpoint {
            branches,
            config,
            epoch,
            history,
        }
    }

    pub fn branch(&self, kind: BranchKind) -> Option<&BranchModel> {
        self.branches.iter().find(|b| b.kind == kind)
    }

    pub fn require(&self, kind: BranchKind) -> Result<&BranchModel> {
        self.branch(kind).ok_or_else(|| {
            Error::Load(format!("checkpoint has no {} branch", kind.name()))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            history: self.history.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchEntry {
                    kind: b.kind,
                    model: b.config.clone(),
                    params: b
                        .shapes()
                        .into_iter()
                        .map(|(name, shape)| ParamEntry {
                            name: name.to_string(),
                            shape,
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut out = MAGIC.to_vec();
        out.push(b'\n');
        serde_json::to_writer(&mut out, &manifest)?;
        out.push(b'\n');
        for b in &self.branches {
            for p in b.params() {
                for v in p.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .and_then(|r| r.strip_prefix(b"\n"))
            .ok_or_else(|| Error::Load("not a checkpoint: bad magic bytes".into()))?;
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Load("manifest is not terminated".into()))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..end])
            .map_err(|e| Error::Load(format!("corrupt manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let mut payload = &rest[end + 1..];
        let mut branches = Vec::with_capacity(manifest.branches.len());
        for entry in manifest.branches {
            let expected = entry.model.manifest();
            let listed: Vec<(&str, &[usize])> = entry
                .params
                .iter()
                .map(|p| (p.name.as_str(), p.shape.as_slice()))
                .collect();
            let wanted: Vec<(&str, &[usize])> =
                expected.iter().map(|(n, s)| (*n, s.as_slice())).collect();
            if listed != wanted {
                return Err(Error::Load(format!(
                    "{} branch manifest does not match its model configuration",
                    entry.kind.name()
                )));
            }
            let mut params = Vec::with_capacity(entry.params.len());
            for p in &entry.params {
                let n: usize = p.shape.iter().product();
                if payload.len() < n * 8 {
                    return Err(Error::Load(format!("payload truncated inside {}", p.name)));
                }
                let (chunk, tail) = payload.split_at(n * 8);
                payload = tail;
                let data = chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                params.push(Tensor::new(p.shape.clone(), data)?);
            }
            branches.push(BranchModel::from_params(entry.kind, entry.model, params)?);
        }
        if !payload.is_empty() {
            return Err(Error::Load(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Checkpoint {
            branches,
            config: manifest.config,
            epoch: manifest.epoch,
            history: manifest.history,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
