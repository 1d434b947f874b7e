//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PIRLCKPT"            8 bytes
//! version               u32
//! config length, bytes  u32, UTF-8 JSON run config echo
//! entry count           u32
//! manifest, per entry:  name length u32, name bytes, dtype u8 (0 = f32, 1 = f64),
//!                       rank u32, extents u64 * rank
//! buffers               raw little-endian elements, in manifest order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"PIRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Adds or replaces a tensor.
    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        let entry = CheckpointEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        };
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// Reads a tensor, converting precision when the stored dtype differs.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))?;
        match e.dtype {
            DType::F32 => {
                let data: Vec<f32> = e.bytes.chunks_exact(4).map(f32::read_le).collect();
                Ok(Tensor::new(e.shape.clone(), data)?.cast())
            }
            DType::F64 => {
                let data: Vec<f64> = e.bytes.chunks_exact(8).map(f64::read_le).collect();
                Ok(Tensor::new(e.shape.clone(), data)?.cast())
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_bytes(&mut out, e.name.as_bytes());
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("missing PIRLCKPT magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = String::from_utf8(r.sized()?.to_vec())
            .map_err(|e| Error::Format(format!("config echo is not UTF-8: {e}")))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.sized()?.to_vec())
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dtype, shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, dtype, shape) in manifest {
            let len = shape.iter().product::<usize>() * dtype.size();
            let bytes = r.take(len)?.to_vec();
            entries.push(CheckpointEntry {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { config, entries })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn sized(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
