//! Flat binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "IPSICKPT"
//! version    u32       1
//! meta_len   u32       length of the UTF-8 JSON metadata that follows
//! meta       meta_len bytes
//! count      u32       number of entries
//! entry*:
//!   name_len u32, name (UTF-8, e.g. "block3/layer0/conv1/weight")
//!   kind     u8        1 = learnable, 0 = buffer (running statistics)
//!   ndim     u32, dims u64 × ndim
//!   values   f64 bit patterns × prod(dims)
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save/load is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameterized;

const MAGIC: &[u8; 8] = b"IPSICKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub learnable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON describing how to rebuild the model.
    pub meta: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn capture(model: &impl Parameterized, meta: String) -> Self {
        let mut entries = Vec::new();
        model.visit_params("", &mut |name, p| {
            entries.push(Entry {
                name: name.to_string(),
                learnable: p.learnable,
                shape: p.shape.clone(),
                values: p.value.clone(),
            })
        });
        Self { meta, entries }
    }

    /// Copies every entry into the matching parameter. Names, order and
    /// shapes must agree exactly.
    pub fn restore(&self, model: &mut impl Parameterized) -> Result<()> {
        let mut idx = 0;
        let mut failure = None;
        model.visit_params_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match self.entries.get(idx) {
                Some(e) if e.name == name && e.shape == p.shape && e.learnable == p.learnable => {
                    p.value.copy_from_slice(&e.values);
                }
                Some(e) => {
                    failure = Some(format!(
                        "entry {idx} is `{}`, model expects `{name}` {:?}",
                        e.name, p.shape
                    ))
                }
                None => failure = Some(format!("checkpoint ends before `{name}`")),
            }
            idx += 1;
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if idx != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} entries, model has {idx}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(u8::from(e.learnable));
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta = read_string(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let mut kind = [0u8; 1];
            read_exact(&mut r, &mut kind)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let len = len
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` overruns the file")))?;
            let values = r[..len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            r = &r[len * 8..];
            entries.push(Entry {
                name,
                learnable: kind[0] == 1,
                shape,
                values,
            });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("string overruns the file".into()));
    }
    let (s, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}
