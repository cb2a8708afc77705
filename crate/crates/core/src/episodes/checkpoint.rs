//! Binary parameter checkpoints.
//!
//! ```text
//! "ICRL"               4 bytes
//! version              u32 (= 1)
//! entry count          u32
//! per entry:
//!   name length        u32, then UTF-8 name
//!   rank               u32, then u32 per dimension
//!   values             f32 × product(dims)
//! metadata length      u32, then UTF-8 `key = value` lines
//! ```
//!
//! All integers and floats are little-endian. Parameters whose name starts
//! with `backbone.` belong to the backbone group on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::{ParamGroup, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICRL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

fn group_for(name: &str) -> ParamGroup {
    if name.starts_with("backbone.") {
        ParamGroup::Backbone
    } else {
        ParamGroup::Module
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let text = kv::format(&self.meta);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<(usize, &[u8])> {
            let at = pos;
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::parse(at, format!("truncated: needed {} more bytes", n)))?;
            pos = end;
            Ok((at, &bytes[at..end]))
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;

        let (_, magic) = take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "bad magic, expected ICRL"));
        }
        let (_, v) = take(4)?;
        if u32_at(v) != CHECKPOINT_VERSION as usize {
            return Err(Error::parse(4, format!("unsupported checkpoint version {}", u32_at(v))));
        }
        let count = u32_at(take(4)?.1);
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = u32_at(take(4)?.1);
            let (at, raw) = take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::parse(at, "parameter name is not UTF-8"))?
                .to_string();
            if params.contains(&name) {
                return Err(Error::parse(at, format!("duplicate parameter `{}`", name)));
            }
            let rank = u32_at(take(4)?.1);
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(u32_at(take(4)?.1));
            }
            let n: usize = shape.iter().product();
            let (_, raw) = take(n.checked_mul(4).ok_or_else(|| Error::parse(at, "shape overflows"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.insert(name.clone(), group_for(&name), Tensor::new(shape, data));
        }
        let len = u32_at(take(4)?.1);
        let (at, raw) = take(len)?;
        let text = std::str::from_utf8(raw).map_err(|_| Error::parse(at, "metadata is not UTF-8"))?;
        let meta = kv::parse_map(text).map_err(|e| Error::parse(at, e.to_string()))?;
        if pos != bytes.len() {
            return Err(Error::parse(pos, "trailing bytes after metadata"));
        }
        Ok(Checkpoint { params, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }
}
