//! Named-parameter checkpoints in the `CITC` format.
//!
//! Layout: magic, u32 version, u32 step, u32 count, then per parameter a u16
//! name length, the UTF-8 name, u8 rank, u32 dims and f32 LE values. A CRC-32
//! of everything before it closes the file. The run configuration travels as
//! the parameter [`CONFIG_ENTRY`], one value per byte of its canonical text.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::tensor::ByteCursor;
use crate::kernel::{ParamStore, Tensor};

pub const CITC_MAGIC: &[u8; 4] = b"CITC";
pub const CITC_VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u32,
    /// Parameters in store order; excludes the config entry.
    pub params: Vec<(String, Tensor)>,
    /// Canonical config text; empty when none was recorded.
    pub config: String,
}

impl Checkpoint {
    /// Snapshot of every parameter in `stores`, in order.
    pub fn from_stores(step: u32, config: String, stores: &[&ParamStore]) -> Self {
        let params = stores
            .iter()
            .flat_map(|s| s.iter().map(|p| (p.name.clone(), p.value.clone())))
            .collect();
        Checkpoint { step, params, config }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Loads the entries named like `store`'s parameters; extra entries are ignored.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        store.load_named(
            self.params
                .iter()
                .filter(|(n, _)| names.contains(n))
                .map(|(n, t)| (n.as_str(), t)),
        )
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(&str, Tensor)> = self.params.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        if !self.config.is_empty() {
            let bytes: Vec<f64> = self.config.bytes().map(f64::from).collect();
            entries.push((CONFIG_ENTRY, Tensor::from_vec(bytes)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CITC_MAGIC);
        out.extend_from_slice(&CITC_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Invalid(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes, "checkpoint");
        if cur.take(4)? != CITC_MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CITC_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CITC_VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checkpoint CRC mismatch".into()));
        }
        let mut cur = ByteCursor::new(&body[8..], "checkpoint");
        let step = cur.u32()?;
        let count = cur.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        let mut config = String::new();
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            if rank == 0 || n == 0 {
                return Err(Error::Corrupt(format!("parameter {name} has empty shape {shape:?}")));
            }
            let t = Tensor::new(&shape, cur.f32s(n)?)?;
            if name == CONFIG_ENTRY {
                let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
                config = String::from_utf8(bytes).map_err(|_| Error::Corrupt("config entry is not UTF-8".into()))?;
            } else {
                params.push((name, t));
            }
        }
        if !cur.is_done() {
            return Err(Error::Corrupt("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { step, params, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
