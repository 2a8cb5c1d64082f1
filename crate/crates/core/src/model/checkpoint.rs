//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DUALLMCK"
//! version  u32      (currently 1)
//! config   u32 length + UTF-8 key=value text
//! rng      u64 seed, u64 stream, u128 word position
//! dtype    u8       0 = f32, 1 = f64
//! count    u32      number of parameters
//! per parameter:
//!   u32 name length + UTF-8 name
//!   u32 rank, then rank × u64 extents
//!   raw values
//! ```

use std::path::Path;

use super::{build, InitScheme, Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"DUALLMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub rng: RngStream,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        out.extend_from_slice(&self.rng.seed().to_le_bytes());
        out.extend_from_slice(&self.rng.stream().to_le_bytes());
        out.extend_from_slice(&self.rng.position().to_le_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.values() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = ModelConfig::from_text(&r.string()?)?;
        let (seed, stream, pos) = (r.u64()?, r.u64()?, r.u128()?);
        if r.u8()? != T::DTYPE {
            return Err(Error::Checkpoint(
                "stored precision differs from the requested one".into(),
            ));
        }
        let zero = ModelConfig {
            init: InitScheme::Zero,
            ..config.clone()
        };
        let (mut store, _) = build::<T>(&zero, &mut RngStream::new(0))?;
        let count = r.u32()? as usize;
        if count != store.len() {
            return Err(Error::Checkpoint(format!(
                "{count} parameters stored, config describes {}",
                store.len()
            )));
        }
        for i in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let id = store
                .id(&name)
                .filter(|id| id.index() == i)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("unexpected parameter `{name}` at position {i}"))
                })?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * T::BYTES)?;
            let values = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            *store.value_mut(id) = Tensor::new(&shape, values)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            store,
            rng: RngStream::restore(seed, stream, pos),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> Result<Model> {
        Model::bind(&self.config, &self.store)
    }
}
