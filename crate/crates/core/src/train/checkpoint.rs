//! Versioned binary checkpoint: config snapshot plus named little-endian f32 tensors.
//!
//! Layout: magic, `u32` version, `u64`-prefixed config text, `u64` tensor count,
//! then per tensor a `u32`-prefixed name, `u32` rank, `u64` dims and the data.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{AliseError, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ALISECKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore<f32>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AliseError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| AliseError::Checkpoint("length overflow".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| AliseError::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new<T: Scalar>(config: impl Into<String>, params: &ParamStore<T>) -> Self {
        Self { config: config.into(), params: params.cast() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(AliseError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AliseError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let config = r.string(n)?;
        let count = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| AliseError::Checkpoint("size overflow".into()))?)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            if params.contains(&name) {
                return Err(AliseError::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(AliseError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, lowercase hex.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every template parameter from the checkpoint, checking names and shapes.
    pub fn restore<T: Scalar>(&self, template: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for (name, t) in template.iter() {
            let saved = self
                .params
                .get(name)
                .map_err(|_| AliseError::Checkpoint(format!("missing tensor {name}")))?;
            if saved.shape() != t.shape() {
                return Err(AliseError::Checkpoint(format!(
                    "{name}: saved shape {:?}, model expects {:?}",
                    saved.shape(),
                    t.shape()
                )));
            }
            out.insert(name.clone(), saved.cast());
        }
        Ok(out)
    }
}
