//! Versioned little-endian checkpoint.
//!
//! ```text
//! magic    8 bytes  "GAVSCKPT"
//! version  u32
//! count    u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × numel }
//! ```

use std::fs;
use std::path::Path;

use gavs_core::{ParamStore, Tensor};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"GAVSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err("not a gavs checkpoint".into());
    }
    let truncated = || "truncated checkpoint".to_string();
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let ndim = r.u32().ok_or_else(truncated)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize).ok_or_else(truncated))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
        let raw = r.take(numel.checked_mul(8).ok_or("shape overflows")?).ok_or_else(truncated)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push(NamedTensor { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store)).at(path)
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Overwrites every parameter of `store` from `entries`. The two must hold
/// exactly the same names and shapes.
pub fn restore(store: &mut ParamStore, entries: &[NamedTensor]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter {} is not in the model", e.name)))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != e.tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {}: checkpoint shape {:?}, model shape {:?}",
                e.name,
                e.tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = e.tensor.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::matrix(2, 3, vec![1.5, -2.0, 0.0, 1e-300, f64::MAX, -0.25]).unwrap())
            .unwrap();
        s.add("b", Tensor::scalar(7.0)).unwrap();
        s
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..8], b"GAVSCKPT");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[8, 0, 0, 0]);
        assert_eq!(&bytes[20..28], b"a.weight");
        // ndim 2, dims 2 and 3, then the first value.
        assert_eq!(&bytes[28..32], &[2, 0, 0, 0]);
        assert_eq!(&bytes[32..40], &2u64.to_le_bytes());
        assert_eq!(&bytes[48..56], &1.5f64.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let back = decode(&encode(&s)).unwrap();
        let mut t = store();
        t.iter_mut().for_each(|(_, p)| p.tensor.data_mut().fill(0.0));
        restore(&mut t, &back).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(decode(&wrong).unwrap_err().contains("version 9"));
        assert!(decode(b"PNG").is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let entries = decode(&encode(&store())).unwrap();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::matrix(3, 2, vec![0.0; 6]).unwrap()).unwrap();
        other.add("b", Tensor::scalar(0.0)).unwrap();
        assert!(restore(&mut other, &entries).is_err());
        let mut fewer = ParamStore::new();
        fewer.add("b", Tensor::scalar(0.0)).unwrap();
        assert!(restore(&mut fewer, &entries).is_err());
    }
}
