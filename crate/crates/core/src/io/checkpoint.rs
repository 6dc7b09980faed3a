//! Binary checkpoint (`.wdif`) and single-tensor (`.wdt`) formats.
//!
//! Both are little-endian and end with a CRC32 of every preceding byte.
//!
//! ```text
//! checkpoint: "WDIF" u32:version u64:config_len config_utf8
//!             u32:count { u32:name_len name_utf8 tensor_record }*count u32:crc
//! tensor:     "WDT1" u32:version tensor_record u32:crc
//! record:     u8:dtype(0=f32,1=f64) u32:rank u64:dims[rank] payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WDIF";
pub const TENSOR_MAGIC: &[u8; 4] = b"WDT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration text, stored verbatim.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks tensor {name}")))
    }
}

fn put_record(out: &mut Vec<u8>, t: &Tensor, dtype: DType) {
    out.push(dtype.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn encode_checkpoint(ck: &Checkpoint, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.config.len() as u64).to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_record(&mut out, t, dtype);
    }
    seal(out)
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_record(&mut out, t, dtype);
    seal(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.bytes.len() < 12 {
            return Err(self.err("file too short"));
        }
        let body = &self.bytes[..self.bytes.len() - 4];
        let stored = u32::from_le_bytes(self.bytes[self.bytes.len() - 4..].try_into().expect("4 bytes"));
        if self.take(4, "magic")? != magic {
            self.pos = 0;
            return Err(self.err(format!("bad magic (expected {:?})", String::from_utf8_lossy(magic))));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!("unsupported format version {version}")));
        }
        let actual = crc32fast::hash(body);
        if actual != stored {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: body.len(),
                msg: format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        // Exclude the CRC from further reads.
        self.bytes = body;
        Ok(())
    }

    fn record(&mut self) -> Result<Tensor> {
        let dtype = match self.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            d => return Err(self.err(format!("unknown dtype tag {d}"))),
        };
        let rank = self.u32("rank")? as usize;
        if rank > 16 {
            return Err(self.err(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.err("tensor size overflows"))?;
        let width = if dtype == DType::F64 { 8 } else { 4 };
        let raw = self.take(
            n.checked_mul(width).ok_or_else(|| self.err("tensor size overflows"))?,
            "payload",
        )?;
        let data = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        Tensor::new(&dims, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(CHECKPOINT_MAGIC)?;
    let clen = r.u64("config length")? as usize;
    let config = r.string(clen, "config")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = r.string(nlen, "tensor name")?;
        tensors.push((name, r.record()?));
    }
    r.finish()?;
    Ok(Checkpoint { config, tensors })
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(TENSOR_MAGIC)?;
    let t = r.record()?;
    r.finish()?;
    Ok(t)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint, dtype: DType) -> Result<()> {
    fs::write(path, encode_checkpoint(ck, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "train.seed = 3\n# ü\n".into(),
            tensors: vec![
                ("a".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25)),
                ("meta/x".into(), Tensor::scalar(f64::MIN_POSITIVE)),
                ("empty".into(), Tensor::zeros(&[0, 4])),
            ],
        }
    }

    #[test]
    fn f64_roundtrip_is_bitwise() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck, DType::F64);
        assert_eq!(&bytes[..4], b"WDIF");
        let back = decode_checkpoint(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn f32_storage_rounds() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck, DType::F32), Path::new("m")).unwrap();
        let (a, b) = (ck.get("a").unwrap(), back.get("a").unwrap());
        assert!(a.max_abs_diff(b).unwrap() < 1e-7);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = encode_checkpoint(&sample(), DType::F64);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let e = decode_checkpoint(&bytes, Path::new("m")).unwrap_err();
        assert!(e.to_string().contains("CRC"), "{e}");
        let e = decode_checkpoint(&bytes[..8], Path::new("m")).unwrap_err();
        assert!(matches!(e, Error::Format { .. }));
        let mut bad = encode_tensor(&Tensor::zeros(&[1]), DType::F64);
        bad[0] = b'X';
        assert!(decode_tensor(&bad, Path::new("t"))
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn tensor_roundtrip() {
        let t = Tensor::from_fn(&[1, 12, 2, 2], |i| (i as f64).sin());
        let back = decode_tensor(&encode_tensor(&t, DType::F64), Path::new("t")).unwrap();
        assert_eq!(back, t);
    }
}
