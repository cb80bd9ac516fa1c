use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::nn::ParamStore;
use crate::numerics::{DType, Tensor};

pub const MAGIC: &[u8; 8] = b"CIVSFCK1";

/// Named tensors plus ordered `key:value` metadata.
///
/// Layout, little-endian throughout:
///
/// ```text
/// magic            8 bytes  "CIVSFCK1"
/// meta_len         u32
/// metadata         meta_len bytes of "key:value\n" lines
/// count            u32
/// per tensor       u32 name length, name bytes, u8 dtype tag, u8 rank,
///                  u32 extents[rank], u64 byte offset into the data block
/// data             raw f32 values
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Metadata value that must be present.
    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_store(&mut self, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.push((name.to_string(), t.clone()));
        }
    }

    /// Tensors whose names satisfy `keep`, as a parameter store.
    pub fn store(&self, keep: impl Fn(&str) -> bool) -> Result<ParamStore<f32>> {
        let mut s = ParamStore::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| keep(n)) {
            s.register(name, t.clone())?;
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains([':', '\n']) || v.contains('\n') {
                return Err(Error::Contract(format!("metadata entry {k:?} cannot be stored")));
            }
            meta.push_str(k);
            meta.push(':');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DType::F32.tag());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            let at = magic.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::Format {
                offset: at as u64,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Format {
            offset: meta_at as u64,
            msg: "metadata is not UTF-8".into(),
        })?;
        let mut meta = Vec::new();
        for line in text.lines() {
            let (k, v) = line.split_once(':').ok_or_else(|| Error::Format {
                offset: meta_at as u64,
                msg: format!("metadata line {line:?} lacks ':'"),
            })?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let tag_at = r.pos;
            let tag = r.u8()?;
            if tag != DType::F32.tag() {
                return Err(Error::Format {
                    offset: tag_at as u64,
                    msg: format!("unsupported dtype tag {tag} for `{name}`"),
                });
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            entries.push((name, shape, offset));
        }
        let data = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        let mut used = 0usize;
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            if end > data.len() {
                return Err(Error::Format {
                    offset: (r.pos + offset) as u64,
                    msg: format!("tensor `{name}` runs past the end of the file"),
                });
            }
            let values = data[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            used = used.max(end);
            tensors.push((name, Tensor::new(shape, values)?));
        }
        if used != data.len() {
            return Err(Error::Format {
                offset: (r.pos + used) as u64,
                msg: "trailing bytes after tensor data".into(),
            });
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: wanted {n} bytes"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
