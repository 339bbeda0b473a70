//! `SDCK` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SDCK" | u16 version=1 | u32 count
//! count × ( u16 name_len | name (UTF-8) | u8 rank | rank × u32 extent | f32 data )
//! ```
//!
//! Entries are written in name order. Adapter weights live under the
//! `adapter.` prefix, so an adapter-only checkpoint is the same format
//! restricted to that prefix.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Captures every parameter whose name passes `keep`.
    pub fn from_store<F: Float>(store: &ParamStore<F>, keep: impl Fn(&str) -> bool) -> Self {
        let entries = store
            .iter()
            .filter(|(_, p)| keep(&p.name))
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|x| x.f64() as f32).collect(),
            })
            .collect();
        Checkpoint { entries }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected SDCK"),
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: at + 2,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format {
                    offset: r.pos,
                    msg: format!("`{name}` extents {shape:?} exceed the file"),
                })?;
            let raw = r.take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Writes every entry into `store`. Names absent from the store are an
    /// error; store parameters absent from the checkpoint keep their values.
    pub fn apply<F: Float>(&self, store: &mut ParamStore<F>) -> Result<()> {
        for e in &self.entries {
            let id = store.id(&e.name).ok_or_else(|| {
                Error::Validation(format!("checkpoint parameter `{}` not in model", e.name))
            })?;
            if store.value(id).shape() != e.shape.as_slice() {
                return Err(Error::dim("checkpoint", store.value(id).shape(), &e.shape));
            }
            let p = store.get_mut(id);
            p.value = Tensor::new(e.shape.clone(), e.data.iter().map(|&x| F::of(x as f64)).collect())?;
            store.mark_initialized(id);
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated: wanted {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
