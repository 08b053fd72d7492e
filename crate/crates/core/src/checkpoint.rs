//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "DAEPCKPT"
//! version      u32       currently 1
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 TOML (model config, precision, training metadata)
//! n_tensors    u32
//! n_tensors x {
//!     name_len u32, name (UTF-8)
//!     dtype    u8        1 = f32, 2 = f64
//!     ndim     u32, dims u64 x ndim
//!     payload  numel x dtype size, little-endian, row-major
//! }
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Tensors are written in store order; values round-trip bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DAEPCKPT";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shallow_clone()))
            .collect()
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(meta: &str, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let t = t.detach().contiguous();
        let dims = t.size();
        let flat = t.flatten(0, -1);
        let dtype = match t.kind() {
            Kind::Float => 1u8,
            Kind::Double => 2u8,
            other => return Err(corrupt(format!("unsupported tensor kind {other:?} for {name}"))),
        };
        buf.push(dtype);
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        if dtype == 1 {
            let values: Vec<f32> = flat.try_into()?;
            values.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        } else {
            let values: Vec<f64> = flat.try_into()?;
            values.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "truncated at byte {}: need {n} more bytes, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch, file is corrupt or truncated"));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|e| corrupt(format!("metadata is not UTF-8: {e}")))?
        .to_string();
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| corrupt(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as i64))
            .collect::<Result<Vec<i64>>>()?;
        let numel: usize = dims.iter().map(|d| *d as usize).product();
        let tensor = match dtype {
            1 => {
                let raw = r.take(numel * 4)?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_slice(&v).reshape(&dims)
            }
            2 => {
                let raw = r.take(numel * 8)?;
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_slice(&v).reshape(&dims)
            }
            other => return Err(corrupt(format!("unknown dtype tag {other} for {name}"))),
        };
        tensors.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(corrupt(format!(
            "{} trailing bytes after tensor table",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save(path: &Path, meta: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    // Write-then-rename so an interrupted save never leaves a half-written checkpoint.
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn sample() -> Vec<(String, Tensor)> {
        let mut rng = SeededRng::new(4);
        vec![
            ("a.weight".into(), rng.normal_tensor(&[3, 2], Kind::Float)),
            ("b".into(), rng.normal_tensor(&[5], Kind::Double)),
            ("scalar".into(), Tensor::from(7.5f64)),
        ]
    }

    #[test]
    fn roundtrip_bit_exact() {
        let tensors = sample();
        let bytes = encode("x = 1\n", &tensors).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.meta, "x = 1\n");
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.kind(), t2.kind());
            assert!(t1.equal(t2));
        }
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode("", &sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        let bytes = encode("", &sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 10]).is_err());
        assert!(decode(b"garbage").is_err());
    }
}
