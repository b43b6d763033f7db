//! The FPGN checkpoint container: a named tensor map with a fixed
//! little-endian layout.
//!
//! Layout: magic `FPGN`, version byte 0x01, u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//! u8 ndim, ndim x u64 dims, raw little-endian data. Tensors are stored
//! sorted by name, so save -> load -> save is byte-identical.
//!
//! Non-tensor payloads ride inside tensor records: u64 counters as the raw
//! bits of a one-element f64 tensor, strings as byte-valued f32 tensors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::element::{Dtype, Element};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FPGN";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, RawTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert<T: Element>(&mut self, name: &str, t: &Tensor<T>) {
        assert!(name.len() <= u16::MAX as usize, "tensor name too long");
        let mut data = Vec::with_capacity(t.numel() * T::DTYPE.width());
        for &v in t.data() {
            v.write_le(&mut data);
        }
        self.tensors.insert(
            name.to_string(),
            RawTensor {
                dtype: T::DTYPE,
                dims: t.dims().iter().map(|&d| d as u64).collect(),
                data,
            },
        );
    }

    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let raw = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
        if raw.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name:?} has dtype {}, expected {}",
                raw.dtype,
                T::DTYPE
            )));
        }
        let dims: Vec<usize> = raw.dims.iter().map(|&d| d as usize).collect();
        let width = T::DTYPE.width();
        let values: Vec<T> = raw
            .data
            .chunks_exact(width)
            .map(|c| T::read_le(c))
            .collect();
        Tensor::from_vec(&dims, values)
    }

    /// Fills `t` in place from the stored tensor of the same name; dims must
    /// match exactly.
    pub fn load_into<T: Element>(&self, name: &str, t: &mut Tensor<T>) -> Result<()> {
        let stored = self.tensor::<T>(name)?;
        if stored.dims() != t.dims() {
            return Err(Error::Format(format!(
                "tensor {name:?} dims {:?} do not match expected {:?}",
                stored.dims(),
                t.dims()
            )));
        }
        t.data_mut().copy_from_slice(stored.data());
        Ok(())
    }

    /// Stores a u64 counter as the raw bits of a one-element f64 tensor.
    pub fn insert_u64(&mut self, name: &str, value: u64) {
        self.tensors.insert(
            name.to_string(),
            RawTensor {
                dtype: Dtype::F64,
                dims: vec![1],
                data: value.to_le_bytes().to_vec(),
            },
        );
    }

    pub fn u64_value(&self, name: &str) -> Result<u64> {
        let raw = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing counter {name:?}")))?;
        if raw.data.len() != 8 {
            return Err(Error::Corrupt(format!("counter {name:?} has wrong size")));
        }
        Ok(u64::from_le_bytes(raw.data[..8].try_into().unwrap()))
    }

    /// Stores UTF-8 text as a byte-valued f32 tensor.
    pub fn insert_text(&mut self, name: &str, text: &str) {
        let bytes = text.as_bytes();
        let mut data = Vec::with_capacity(bytes.len() * 4);
        for &b in bytes {
            (b as f32).write_le(&mut data);
        }
        self.tensors.insert(
            name.to_string(),
            RawTensor {
                dtype: Dtype::F32,
                dims: vec![bytes.len().max(1) as u64],
                data: if bytes.is_empty() {
                    vec![0u8; 4]
                } else {
                    data
                },
            },
        );
    }

    pub fn text_value(&self, name: &str) -> Result<String> {
        let raw = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing text {name:?}")))?;
        let bytes: Vec<u8> = raw
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as u8)
            .collect();
        String::from_utf8(bytes)
            .map_err(|_| Error::Corrupt(format!("text {name:?} is not valid UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, raw) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(raw.dtype.code());
            out.push(raw.dims.len() as u8);
            for &d in &raw.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&raw.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"FPGN\"",
                &magic[..4.min(magic.len())]
            )));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = Dtype::from_code(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()?);
            }
            let numel: u64 = dims.iter().product();
            let nbytes = numel as usize * dtype.width();
            let data = r.take(nbytes)?.to_vec();
            tensors.insert(name, RawTensor { dtype, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut ck = Checkpoint::new();
        let mut rng = Rng::from_seed(3);
        let a = Tensor::<f32>::randn(&[2, 3, 4, 4], &mut rng).unwrap();
        let b = Tensor::<f64>::randn(&[7], &mut rng).unwrap();
        ck.insert("model.a", &a);
        ck.insert("model.b", &b);
        ck.insert_u64("meta.step", 12345);
        ck.insert_text("meta.config", "{\"resolution\":32}");

        let bytes = ck.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);

        let a2 = loaded.tensor::<f32>("model.a").unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(a2.dims(), a.dims());
        let b2 = loaded.tensor::<f64>("model.b").unwrap();
        assert_eq!(b2.data(), b.data());
        assert_eq!(loaded.u64_value("meta.step").unwrap(), 12345);
        assert_eq!(
            loaded.text_value("meta.config").unwrap(),
            "{\"resolution\":32}"
        );
    }

    #[test]
    fn bad_magic_is_format_error() {
        let err = Checkpoint::from_bytes(b"XXXX\x01\x00\x00\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn wrong_version_is_version_error() {
        let mut bytes = Checkpoint::new().to_bytes();
        bytes[4] = 99;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        match err {
            Error::Version { expected, found } => {
                assert_eq!(expected, 1);
                assert_eq!(found, 99);
            }
            other => panic!("expected version error, got {other}"),
        }
    }

    #[test]
    fn truncation_is_corruption_error() {
        let mut ck = Checkpoint::new();
        ck.insert("t", &Tensor::<f32>::ones(&[8]).unwrap());
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_format_error() {
        let mut ck = Checkpoint::new();
        ck.insert("t", &Tensor::<f32>::ones(&[2]).unwrap());
        assert!(matches!(
            ck.tensor::<f64>("t").unwrap_err(),
            Error::Format(_)
        ));
    }
}
