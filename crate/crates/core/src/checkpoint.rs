//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic    8 bytes   "NTSCKPT\0"
//! version  u32       1
//! meta     u64 len + UTF-8 JSON {"op": .., "entities": [..], "relations": [..]}
//! count    u32       number of tensors
//! tensor   u32 name len, name bytes, u32 rank, u64 × rank dims, f64 × size values
//! ```
//!
//! Tensors are written in name order.

use crate::datasets::TripleDataset;
use crate::error::{NtsError, Result};
use crate::ops::{ModelParams, TernaryOpSpec};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"NTSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    op: TernaryOpSpec,
    entities: Vec<String>,
    relations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: TernaryOpSpec,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(spec: &TernaryOpSpec, dataset: &TripleDataset, params: &ModelParams) -> Self {
        Self {
            spec: spec.clone(),
            entities: dataset.entities.names().to_vec(),
            relations: dataset.relations.names().to_vec(),
            params: params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            op: self.spec.clone(),
            entities: self.entities.clone(),
            relations: self.relations.clone(),
        })
        .map_err(|e| NtsError::Data(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.params.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NtsError::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NtsError::Data(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.len64()?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| NtsError::Data(format!("bad checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| NtsError::Data("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len64()).collect::<Result<Vec<_>>>()?;
            let size = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NtsError::Data("tensor size overflows".into()))?;
            let raw = r.take(size.checked_mul(8).ok_or_else(|| NtsError::Data("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| NtsError::Data(format!("tensor '{name}': {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(NtsError::Data("trailing bytes after checkpoint".into()));
        }
        let ckpt = Self {
            spec: meta.op,
            entities: meta.entities,
            relations: meta.relations,
            params: ModelParams { tensors },
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let p = &self.params;
        if !p.tensors.contains_key(crate::ops::ENTITIES) {
            return Err(NtsError::Data("checkpoint has no entity table".into()));
        }
        if p.num_entities() != self.entities.len() || p.num_relations() != self.relations.len() {
            return Err(NtsError::Data("checkpoint tensors disagree with its vocabulary".into()));
        }
        if p.dim() != self.spec.dim {
            return Err(NtsError::Data("checkpoint tensors disagree with op.dim".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Errors unless `dataset` uses exactly this checkpoint's vocabularies.
    pub fn check_vocab(&self, dataset: &TripleDataset) -> Result<()> {
        if dataset.entities.names() != self.entities.as_slice() {
            return Err(NtsError::Data("entity vocabulary differs from the checkpoint's".into()));
        }
        if dataset.relations.names() != self.relations.as_slice() {
            return Err(NtsError::Data("relation vocabulary differs from the checkpoint's".into()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NtsError::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| NtsError::Data("length out of range".into()))
    }
}
