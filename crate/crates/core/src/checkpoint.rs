//! Binary checkpoint container: named tensors plus a JSON metadata block.
//!
//! Layout, little-endian: `"CAMS"`, version `u32`, tensor count `u32`, then per
//! tensor a `u16` name length, the UTF-8 name, dtype code `u8`, rank `u8`,
//! one `u32` per extent and the raw values; finally a `u32` length and the
//! UTF-8 JSON metadata.

use std::path::Path;

use camseg_tensor::{DType, Float, ParamStore, Tensor};

use crate::error::{io_err, CamsegError, Result};

pub const MAGIC: &[u8; 4] = b"CAMS";
pub const VERSION: u32 = 1;

/// A stored tensor. Values are held as `f64`, which represents both
/// storage precisions exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { tensors: Vec::new(), meta }
    }

    pub fn add_params<T: Float>(&mut self, params: &ParamStore<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if self.tensors.iter().any(|s| s.name == name) {
                return Err(CamsegError::Config(format!("duplicate checkpoint tensor {name}")));
            }
            self.tensors.push(StoredTensor {
                name: name.to_string(),
                dtype: T::DTYPE,
                tensor: t.cast(),
            });
        }
        Ok(())
    }

    /// Every tensor whose name starts with one of `prefixes`, in file order.
    pub fn params<T: Float>(&self, prefixes: &[&str]) -> ParamStore<T> {
        let mut p = ParamStore::new();
        for s in &self.tensors {
            if prefixes.iter().any(|pre| s.name.starts_with(pre)) {
                p.add(s.name.clone(), s.tensor.cast());
            }
        }
        p
    }

    pub fn dtype(&self) -> Option<DType> {
        self.tensors.first().map(|s| s.dtype)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for s in &self.tensors {
            let name = s.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| CamsegError::Config(format!("tensor name too long: {}", s.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(s.dtype.code());
            out.push(s.tensor.ndim() as u8);
            for &e in s.tensor.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            match s.dtype {
                DType::F32 => s.tensor.data().iter().for_each(|&v| (v as f32).write_le(&mut out)),
                DType::F64 => s.tensor.data().iter().for_each(|&v| v.write_le(&mut out)),
            }
        }
        let meta = serde_json::to_string(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    /// `label` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], label: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, label };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, not a camseg checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CamsegError::CheckpointVersion {
                path: label.to_string(),
                found: version,
                supported: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error(at, "tensor name is not UTF-8"))?
                .to_string();
            let code_at = r.pos;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| r.error(code_at, "unknown dtype code"))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| r.error(at, "tensor too large"))?;
            let size = dtype.size_of();
            let raw = r.take(numel.checked_mul(size).ok_or_else(|| r.error(at, "tensor too large"))?)?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            };
            tensors.push(StoredTensor {
                name,
                dtype,
                tensor: Tensor::new(shape, data)?,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let meta_raw = r.take(meta_len)?;
        let meta = serde_json::from_slice(meta_raw).map_err(|e| r.error(meta_at, &format!("metadata is not valid JSON: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after metadata"));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    label: &'a str,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, msg: &str) -> CamsegError {
        CamsegError::Checkpoint {
            path: self.label.to_string(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, &format!("truncated: needed {n} more bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::<f64>::new();
        p.add("a.w", Tensor::from_fn([2, 3], |i| i as f64 * 0.1 - 0.2));
        p.add("b", Tensor::from_fn([4], |i| (i as f64).sin()));
        let mut c = Checkpoint::new(serde_json::json!({"step": 7}));
        c.add_params(&p).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), "mem").unwrap();
        assert_eq!(back, c);
        let p: ParamStore<f64> = back.params(&["a."]);
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn f32_tensors_round_trip() {
        let mut p = ParamStore::<f32>::new();
        p.add("x", Tensor::from_fn([3], |i| 1.0 / (i as f32 + 3.0)));
        let mut c = Checkpoint::new(serde_json::Value::Null);
        c.add_params(&p).unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), "mem").unwrap();
        assert_eq!(back.params::<f32>(&[""]), p);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(CamsegError::Checkpoint { offset: 0, .. })));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&v2, "m"), Err(CamsegError::CheckpointVersion { found: 2, .. })));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(Checkpoint::from_bytes(cut, "m"), Err(CamsegError::Checkpoint { .. })));
    }
}
