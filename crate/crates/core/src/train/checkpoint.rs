//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic "DPI1" | version u32 | config length u32 | config UTF-8
//! params section | optimizer section | EMA section | CRC32 u32
//! ```
//!
//! A section is a tensor count `u32` followed by, per tensor, a name length
//! `u16`, the UTF-8 name, the rank `u8`, each dimension as `u64` and the
//! payload as `f64`. The CRC covers every byte before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DPI1";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration text.
    pub config: String,
    pub params: NamedTensors,
    /// Optimizer state: `optim/step` then the first and second moments.
    pub optim: NamedTensors,
    pub ema: NamedTensors,
}

impl Checkpoint {
    /// Training iterations completed, read from the optimizer step counter.
    pub fn iteration(&self) -> u64 {
        self.optim
            .iter()
            .find(|(n, _)| n == "optim/step")
            .map(|(_, t)| t.data().first().copied().unwrap_or(0.0) as u64)
            .unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config.as_bytes();
        let cfg_len = u32::try_from(cfg.len()).map_err(|_| Error::Config("config text too long".into()))?;
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(cfg);
        for section in [&self.params, &self.optim, &self.ema] {
            write_section(&mut out, section)?;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(format_err(0, "file shorter than the checksum"));
        }
        let body_len = bytes.len() - 4;
        let mut r = Reader { bytes: &bytes[..body_len], pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(4, format!("unsupported format version {}", version)));
        }
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(format_err(body_len, format!("checksum mismatch: stored {:08x}, computed {:08x}", stored, actual)));
        }
        let cfg_len = r.u32()? as usize;
        let at = r.pos;
        let config = String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| format_err(at, "config is not UTF-8"))?;
        let params = read_section(&mut r)?;
        let optim = read_section(&mut r)?;
        let ema = read_section(&mut r)?;
        if r.pos != body_len {
            return Err(format_err(r.pos, "trailing bytes before the checksum"));
        }
        Ok(Self {
            config,
            params,
            optim,
            ema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

fn write_section(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) -> Result<()> {
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Config("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let nl = u16::try_from(nb.len()).map_err(|_| Error::Config(format!("tensor name too long: {}", name)))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("rank too large: {}", name)))?;
        out.extend_from_slice(&nl.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_section(r: &mut Reader<'_>) -> Result<NamedTensors> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let nl = r.u16()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| format_err(at, "tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos;
            let d = usize::try_from(r.u64()?).map_err(|_| format_err(at, "dimension overflows"))?;
            shape.push(d);
        }
        let at = r.pos;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| format_err(at, format!("payload of '{}' runs past the end", name)))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format_err(at, e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(format_err(self.pos, format!("truncated: need {} bytes, {} left", n, self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "seed = 3\n".into(),
            params: vec![
                ("w".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0]).unwrap()),
                ("s".into(), Tensor::scalar(0.1)),
            ],
            optim: vec![("optim/step".into(), Tensor::vector(vec![12.0]))],
            ema: vec![("w".into(), Tensor::zeros(&[2, 2]))],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.iteration(), 12);
        assert_eq!(&bytes[..4], b"DPI1");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        for i in 0..bytes.len() {
            for bit in [0, 3, 7] {
                let mut b = bytes.clone();
                b[i] ^= 1 << bit;
                assert!(Checkpoint::from_bytes(&b).is_err(), "flip at byte {} bit {}", i, bit);
            }
        }
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }
}
