//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "P2VC" | version u32 | meta_len u32 | meta (JSON) | count u32 | entries
//! entry: name_len u32 | name | dtype u8 | rank u32 | dims u64 * rank | payload
//! ```
//!
//! Entries are written in name order and the metadata bytes are kept
//! verbatim, so load followed by save reproduces the input exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Array, DType, Element, Module, Tensor};

pub const MAGIC: &[u8; 4] = b"P2VC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    meta: Vec<u8>,
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new(meta: &impl Serialize) -> Result<Self> {
        Ok(Self {
            meta: serde_json::to_vec(meta)?,
            entries: BTreeMap::new(),
        })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_slice(&self.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
    }

    pub fn meta_json(&self) -> Result<serde_json::Value> {
        self.meta()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, value: &Array<T>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || self.entries.contains_key(&name) {
            return Err(Error::Checkpoint(format!(
                "duplicate or empty tensor name `{name}`"
            )));
        }
        let mut payload = Vec::with_capacity(value.numel() * T::DTYPE.size());
        for &x in value.data() {
            x.write_le(&mut payload);
        }
        self.entries.insert(
            name,
            Entry {
                dtype: T::DTYPE,
                shape: value.shape().to_vec(),
                payload,
            },
        );
        Ok(())
    }

    /// Reads `name`, which must have element type `T` and, when given, the
    /// expected shape.
    pub fn array<T: Element>(&self, name: &str, shape: Option<&[usize]>) -> Result<Array<T>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` stored as {:?}, expected {:?}",
                e.dtype,
                T::DTYPE
            )));
        }
        if let Some(s) = shape {
            if s != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {s:?}",
                    e.shape
                )));
            }
        }
        let size = T::DTYPE.size();
        let data = e.payload.chunks_exact(size).map(T::read_le).collect();
        Array::new(e.shape.clone(), data)
    }

    /// Stores every parameter of `module` under `prefix`.
    pub fn insert_module<T: Element, M: Module<T>>(
        &mut self,
        prefix: &str,
        module: &M,
    ) -> Result<()> {
        for (name, t) in module.named_params(prefix) {
            self.insert(name, &t.value())?;
        }
        Ok(())
    }

    /// Overwrites the parameters of `module` with the entries under `prefix`.
    /// Every parameter must be present with a matching shape.
    pub fn load_module<T: Element, M: Module<T>>(&self, prefix: &str, module: &M) -> Result<()> {
        for (name, t) in module.named_params(prefix) {
            let value = self.array::<T>(&name, Some(&t.shape()))?;
            t.set_value(value)?;
        }
        Ok(())
    }

    pub fn tensor<T: Element>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        Ok(Tensor::param(self.array(name, Some(shape))?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta = r.take(meta_len)?.to_vec();
        serde_json::from_slice::<serde_json::Value>(&meta)
            .map_err(|e| Error::Checkpoint(format!("metadata is not JSON: {e}")))?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if previous.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` out of order or duplicated"
                )));
            }
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}` has unknown dtype code {code}"))
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` size overflows")))?;
            let payload = r.take(numel)?.to_vec();
            previous = Some(name.clone());
            entries.insert(
                name,
                Entry {
                    dtype,
                    shape,
                    payload,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
