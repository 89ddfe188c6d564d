//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//! `b"DGCK"`, `u32` version, `u32` topology-JSON length, topology JSON,
//! `u32` group count, then per group: `u16` name length, name, `u64` byte
//! count, that many bytes of `f32` parameters in name order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::DanceModel;
use crate::nn::ParamGroup;
use crate::unet::Topology;

pub const MAGIC: &[u8; 4] = b"DGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub topology: Topology,
    pub groups: BTreeMap<ParamGroup, Vec<f32>>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ckpt_err(format!("truncated archive at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &DanceModel) -> Result<Self> {
        let store = model.store();
        let groups = store
            .groups()
            .into_iter()
            .map(|g| Ok((g, store.group_flat(g)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            topology: model.topology().clone(),
            groups,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let topo = serde_json::to_vec(&self.topology)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(topo.len() as u32).to_le_bytes());
        out.extend_from_slice(&topo);
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (g, data) in &self.groups {
            let name = g.name().as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ckpt_err("not a checkpoint archive"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let topology: Topology = serde_json::from_slice(r.take(n)?)?;
        let count = r.u32()?;
        let mut groups = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| ckpt_err("group name is not UTF-8"))?;
            let g = ParamGroup::from_name(name).ok_or_else(|| ckpt_err(format!("unknown parameter group {name}")))?;
            let bytes = r.u64()? as usize;
            if bytes % 4 != 0 {
                return Err(ckpt_err(format!("group {name} has {bytes} bytes, not a multiple of 4")));
            }
            let data = r
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if groups.insert(g, data).is_some() {
                return Err(ckpt_err(format!("group {name} appears twice")));
            }
        }
        if r.pos != buf.len() {
            return Err(ckpt_err("trailing bytes after last group"));
        }
        Ok(Self { topology, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn has_temporal_groups(&self) -> bool {
        self.groups.keys().any(|g| g.is_temporal())
    }

    /// Builds a model of the stored topology carrying the stored weights.
    pub fn to_model(&self, dtype: DType) -> Result<DanceModel> {
        let model = DanceModel::new(self.topology.clone(), dtype, 0)?;
        let expected = model.store().groups();
        let present: std::collections::BTreeSet<_> = self.groups.keys().copied().collect();
        if expected != present {
            return Err(ckpt_err("checkpoint groups do not match its topology"));
        }
        self.load_groups(&model, &present.into_iter().collect::<Vec<_>>())?;
        Ok(model)
    }

    /// Copies the listed groups into `model`, whose appearance network must
    /// match the stored topology.
    pub fn load_groups(&self, model: &DanceModel, groups: &[ParamGroup]) -> Result<()> {
        if !self.topology.appearance_compatible(model.topology()) {
            return Err(ckpt_err("checkpoint topology is incompatible with the model"));
        }
        for g in groups {
            let data = self
                .groups
                .get(g)
                .ok_or_else(|| ckpt_err(format!("checkpoint lacks group {g}")))?;
            model
                .store()
                .load_group_flat(*g, data)
                .map_err(|e| ckpt_err(format!("group {g}: {e}")))?;
        }
        Ok(())
    }
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

pub fn save_model(model: &DanceModel, path: &Path) -> Result<()> {
    Checkpoint::from_model(model)?.save(path)
}

pub fn load_model(path: &Path, dtype: DType) -> Result<DanceModel> {
    Checkpoint::load(path)?.to_model(dtype)
}
