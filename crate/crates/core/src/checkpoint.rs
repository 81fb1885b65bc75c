//! SSCK model checkpoints.
//!
//! Layout (little endian): magic `SSCK`, `u16` version, `u32` header length,
//! a JSON header, then every parameter as `f64` in store order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::{ModelConfig, Surrogate};
use crate::norm::NormStats;
use crate::solvers::swe::SweParams;

pub const MAGIC: &[u8; 4] = b"SSCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub norm: NormStats,
    pub grid: GridSpec,
    /// Solver constants for hybrid shallow-water rollouts.
    pub swe: Option<SweParams>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Surrogate,
    pub norm: NormStats,
    pub grid: GridSpec,
    pub swe: Option<SweParams>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            norm: self.norm.clone(),
            grid: self.grid,
            swe: self.swe,
            params: (0..store.len())
                .map(|i| ParamEntry {
                    name: store.name(i).to_string(),
                    shape: store.get(i).shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(10 + json.len() + 8 * store.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in store.values() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic, expected SSCK".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = &bytes[10..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let mut model = Surrogate::new(&header.model, 0)?;
        let store = &mut model.store;
        if store.len() != header.params.len() {
            return Err(bad(format!(
                "checkpoint has {} parameter tensors, the model needs {}",
                header.params.len(),
                store.len()
            )));
        }
        for (i, p) in header.params.iter().enumerate() {
            if store.name(i) != p.name || store.get(i).shape() != p.shape.as_slice() {
                return Err(bad(format!(
                    "parameter {i} is {} {:?}, the model expects {} {:?}",
                    p.name,
                    p.shape,
                    store.name(i),
                    store.get(i).shape()
                )));
            }
        }
        let payload = &body[hlen..];
        if payload.len() != 8 * store.count() {
            return Err(bad(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                8 * store.count()
            )));
        }
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for i in 0..store.len() {
            for x in store.get_mut(i).data_mut() {
                *x = vals.next().expect("length checked");
            }
        }
        Ok(Checkpoint {
            model,
            norm: header.norm,
            grid: header.grid,
            swe: header.swe,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
