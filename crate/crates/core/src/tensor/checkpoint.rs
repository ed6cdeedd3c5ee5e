//! Little-endian binary checkpoint layout:
//!
//! ```text
//! magic      4 bytes  "MVCK"
//! version    u32      1
//! meta_len   u32      byte length of the JSON metadata that follows
//! meta       meta_len UTF-8 JSON object
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 × ndim)
//!   payload  f64 × product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::array::Tensor;
use super::params::ParamSet;
use super::TensorError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter set plus free-form JSON metadata (architecture, config).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("JSON value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = u32_le(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u32_le(&mut r)? as usize;
        let meta_bytes = take(&mut r, meta_len)?;
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let count = u32_le(&mut r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = u32_le(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|e| TensorError::Checkpoint(e.to_string()))?
                .to_string();
            let ndim = u32_le(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(&mut r, n.checked_mul(8).ok_or_else(|| TensorError::Checkpoint("overflow".into()))?)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if !r.is_empty() {
            return Err(TensorError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, params })
    }
}

fn read(r: &mut &[u8], buf: &mut [u8]) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|_| TensorError::Checkpoint("truncated".into()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], TensorError> {
    if r.len() < n {
        return Err(TensorError::Checkpoint("truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn u32_le(r: &mut &[u8]) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    read(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TensorError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TensorError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::new(vec![2, 1], vec![1.5, -0.25]).unwrap()).unwrap();
        params.insert("a.bias", Tensor::scalar(3.0)).unwrap();
        Checkpoint { meta: serde_json::json!({"kind": "test"}), params }
    }

    #[test]
    fn layout_is_documented_little_endian() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MVCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + meta_len], br#"{"kind":"test"}"#);
        let rest = &bytes[12 + meta_len..];
        assert_eq!(u32::from_le_bytes(rest[..4].try_into().unwrap()), 2);
        // first tensor: name, ndim=2, dims 2,1, payload 1.5, -0.25
        assert_eq!(u32::from_le_bytes(rest[4..8].try_into().unwrap()), 8);
        assert_eq!(&rest[8..16], b"a.weight");
        assert_eq!(u32::from_le_bytes(rest[16..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(rest[20..28].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(rest[28..36].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(rest[36..44].try_into().unwrap()), 1.5);
    }

    #[test]
    fn round_trip_and_truncation() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
