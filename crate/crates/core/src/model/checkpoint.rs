//! Binary checkpoint format.
//!
//! ```text
//! "CLAWCKPT1"
//! u64 length, UTF-8 canonical model config (key=value lines)
//! per parameter, in declaration order:
//!     u64 name length, UTF-8 name
//!     u64 rank, rank × u64 extents
//!     f32 values
//! ```
//! All integers and floats are little-endian. Running batch-norm
//! statistics are stored like any other tensor.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ClawParams;
use crate::tensor::Real;

pub const MAGIC: &[u8; 9] = b"CLAWCKPT1";

pub fn encode<T: Real>(params: &ClawParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = params.config.to_text();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    for e in params.store.entries() {
        out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u64).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} {v}")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ClawParams<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg_len = r.len("config length")?;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_text(cfg_text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = ClawParams::<T>::skeleton(&config)?;
    let mut seen = vec![false; params.store.len()];
    while !r.done() {
        let name_len = r.len("name length")?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.len("rank")?;
        let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
        let id = params
            .store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if seen[id.index()] {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        seen[id.index()] = true;
        let target = params.store.get_mut(id);
        if target.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, model expects {:?}",
                target.shape()
            )));
        }
        let raw = r.take(target.numel() * 4)?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::from_f64(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!("missing parameter {}", params.store.entries()[i].name)));
    }
    params.check_finite().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(params)
}

pub fn save<T: Real>(params: &ClawParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<ClawParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = init_params::<f32>(&ModelConfig::toy()).unwrap();
        let bytes = encode(&p);
        let q = decode::<f32>(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.store, p.store);
        assert_eq!(encode(&q), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let p = init_params::<f32>(&ModelConfig::toy()).unwrap();
        let bytes = encode(&p);
        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        // drop the final parameter entirely
        let last = p.store.entries().last().unwrap();
        let tail = 8 + last.name.len() + 8 + 8 * last.tensor.rank() + 4 * last.tensor.numel();
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - tail]), Err(Error::Checkpoint(_))));
    }
}
