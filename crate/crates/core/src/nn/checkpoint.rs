//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "TWCKPT\0\0"
//! u32     format version
//! u32     length of metadata, followed by UTF-8 JSON metadata
//! u32     length of fingerprint, followed by UTF-8 fingerprint
//! u64     optimizer step
//! u32     number of parameter sets
//! per set:
//!   u32   number of entries
//!   per entry:
//!     u32 name length, name bytes
//!     u8  trainable flag
//!     u32 rank, u32 extents
//!     f32 values, f32 first moments, f32 second moments (row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::params::ParameterSet;
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TWCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub fingerprint: String,
    pub optimizer_step: u64,
    pub sets: Vec<ParameterSet<f32>>,
}

/// Hex SHA-256 of a configuration string.
pub fn fingerprint(config: &str) -> String {
    Sha256::digest(config.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| ck("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ck("string is not UTF-8"))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| ck("tensor too large"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| ck(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_str(&mut out, &self.metadata);
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        put_u32(&mut out, self.sets.len() as u32);
        for set in &self.sets {
            put_u32(&mut out, set.len() as u32);
            for p in set.iter() {
                put_str(&mut out, &p.name);
                out.push(u8::from(p.trainable));
                put_u32(&mut out, p.value.shape().len() as u32);
                for &d in p.value.shape() {
                    put_u32(&mut out, d as u32);
                }
                put_f32s(&mut out, &p.value);
                put_f32s(&mut out, &p.m);
                put_f32s(&mut out, &p.v);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ck("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ck(format!("unsupported format version {version}")));
        }
        let metadata = r.string()?;
        let fingerprint = r.string()?;
        let optimizer_step = r.u64()?;
        let nsets = r.u32()?;
        let mut sets = Vec::with_capacity(nsets as usize);
        for _ in 0..nsets {
            let mut set = ParameterSet::new();
            for _ in 0..r.u32()? {
                let name = r.string()?;
                let trainable = match r.u8()? {
                    0 => false,
                    1 => true,
                    other => return Err(ck(format!("bad trainable flag {other}"))),
                };
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let value = r.tensor(&shape)?;
                let m = r.tensor(&shape)?;
                let v = r.tensor(&shape)?;
                let id = if trainable {
                    set.add(&name, value)?
                } else {
                    set.add_buffer(&name, value)?
                };
                let p = set.param_mut(id);
                p.m = m;
                p.v = v;
            }
            sets.push(set);
        }
        if r.pos != buf.len() {
            return Err(ck("trailing bytes after checkpoint"));
        }
        Ok(Self {
            metadata,
            fingerprint,
            optimizer_step,
            sets,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut a = ParameterSet::<f32>::new();
        let w = a.add("enc.w", Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, f32::MIN_POSITIVE, 7.0, -0.0]).unwrap()).unwrap();
        a.param_mut(w).m = Tensor::full(&[2, 3], 0.25);
        a.add_buffer("power.mean", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        Checkpoint {
            metadata: "{\"kind\":\"twlc\"}".into(),
            fingerprint: fingerprint("cfg"),
            optimizer_step: 42,
            sets: vec![a, ParameterSet::new()],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn fingerprints_are_stable_hex() {
        let f = fingerprint("abc");
        assert_eq!(f, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
