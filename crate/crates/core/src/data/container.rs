//! In-memory dataset and its FSDS file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FSDS"            4 bytes
//! version           u32 (= 1)
//! class count       u32
//! per class:
//!   name length     u16, then UTF-8 name bytes
//!   instance count  u32
//!   channels, height, width   u32 × 3
//!   instance data   f32 × count·c·h·w
//! CRC32             u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FSDS_MAGIC: &[u8; 4] = b"FSDS";
pub const FSDS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub name: String,
    /// Images of shape `c×h×w`, values in [0, 1].
    pub instances: Vec<Tensor<f32>>,
}

/// Labelled images grouped by class. Immutable once built; share it by reference.
#[derive(Clone, Debug)]
pub struct DatasetContainer {
    classes: Vec<ClassData>,
    shape: [usize; 3],
    /// Where the data came from. Runtime metadata only; not written to FSDS.
    pub provenance: String,
}

impl PartialEq for DatasetContainer {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.classes == other.classes
    }
}

impl DatasetContainer {
    pub fn new(classes: Vec<ClassData>, provenance: impl Into<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Contract("dataset has no classes".into()));
        }
        let first = classes[0]
            .instances
            .first()
            .ok_or_else(|| Error::Contract(format!("class `{}` has no instances", classes[0].name)))?;
        let shape: [usize; 3] = first
            .shape()
            .try_into()
            .map_err(|_| Error::Shape(format!("instances must be c×h×w, got {:?}", first.shape())))?;
        for c in &classes {
            if c.instances.is_empty() {
                return Err(Error::Contract(format!("class `{}` has no instances", c.name)));
            }
            if c.name.len() > u16::MAX as usize {
                return Err(Error::Contract(format!(
                    "class name of {} bytes is too long",
                    c.name.len()
                )));
            }
            if let Some(bad) = c.instances.iter().find(|t| t.shape() != shape) {
                return Err(Error::Shape(format!(
                    "class `{}` mixes shapes {:?} and {:?}",
                    c.name,
                    shape,
                    bad.shape()
                )));
            }
        }
        Ok(DatasetContainer {
            classes,
            shape,
            provenance: provenance.into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassData] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> &ClassData {
        &self.classes[id]
    }

    pub fn instance(&self, class: usize, index: usize) -> &Tensor<f32> {
        &self.classes[class].instances[index]
    }

    pub fn instance_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per: usize = self.shape.iter().product();
        let total: usize = self
            .classes
            .iter()
            .map(|c| c.instances.len() * per * 4 + c.name.len() + 22)
            .sum();
        let mut out = Vec::with_capacity(total + 16);
        out.extend_from_slice(FSDS_MAGIC);
        out.extend_from_slice(&FSDS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.name.len() as u16).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            out.extend_from_slice(&(c.instances.len() as u32).to_le_bytes());
            for &d in &self.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in &c.instances {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::parse(bytes.len(), "truncated before checksum"));
        }
        let body_len = bytes.len() - 4;
        let mut r = Reader {
            buf: &bytes[..body_len],
            pos: 0,
        };
        let magic = r.take(4)?;
        if magic != FSDS_MAGIC {
            return Err(Error::parse(0, "bad magic, expected FSDS"));
        }
        let version = r.u32()?;
        if version != FSDS_VERSION {
            return Err(Error::parse(4, format!("unsupported version {}", version)));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(Error::parse(8, "empty class list"));
        }
        let mut classes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::parse(name_at, "class name is not UTF-8"))?
                .to_string();
            let n = r.u32()? as usize;
            let dims_at = r.pos;
            let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let per = c
                .checked_mul(h)
                .and_then(|x| x.checked_mul(w))
                .ok_or_else(|| Error::parse(dims_at, "instance shape overflows"))?;
            let mut instances = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let raw = r.take(per * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                instances.push(Tensor::new([c, h, w], data));
            }
            classes.push(ClassData { name, instances });
        }
        if r.pos != body_len {
            return Err(Error::parse(r.pos, "trailing bytes before checksum"));
        }
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(Error::parse(
                body_len,
                format!("checksum mismatch (stored {:08x}, computed {:08x})", stored, actual),
            ));
        }
        DatasetContainer::new(classes, "fsds")
    }
}

pub fn save_container(container: &DatasetContainer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, container.to_bytes())?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<DatasetContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut c = DatasetContainer::from_bytes(&bytes)?;
    c.provenance = format!("fsds:{}", path.display());
    Ok(c)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(self.pos, format!("truncated: needed {} more bytes", n))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
