//! FCTL checkpoints:
//! `"FCTL"`, u32 version, u32 count, then per parameter u16 name length,
//! UTF-8 name, u8 rank, rank × u32 dims and an f32 payload; finally u64 seed
//! and u32 completed epochs. All integers little-endian.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FCTL";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub seed: u64,
    pub epochs: u32,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, seed: u64, epochs: u32) -> Self {
        Self {
            params: store.iter().map(|p| (p.name.clone(), p.var.value().cast())).collect(),
            seed,
            epochs,
        }
    }

    pub fn to_store<T: Real>(&self) -> Result<ParamStore<T>> {
        ParamStore::from_named(self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.params.len()).map_err(|_| Error::Format("too many parameters".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.params {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank of {name} too large")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epochs.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an FCTL checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("shape of {name} overflows")))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            params.push((name, t));
        }
        let seed = u64::from_le_bytes(r.array()?);
        let epochs = u32::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { params, seed, epochs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?)
    }
}
