//! Versioned binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "KEYMASK\0"
//! version      u32
//! num_kp       u32
//! grid         u32
//! temperature  f64
//! variance     f64
//! step         u64
//! adam_t       u64
//! config       u32 length + UTF-8 `key = value` lines
//! tensors      u32 count, then per tensor:
//!                u16 name length, name, u8 dtype (0 = f32, 1 = f64),
//!                u8 rank, rank × u64 dims, raw values
//! crc32        u32 over everything above
//! ```

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KEYMASK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub num_kp: u32,
    pub grid: u32,
    pub temperature: f64,
    pub variance: f64,
    pub step: u64,
    pub adam_t: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.num_kp.to_le_bytes());
        out.extend_from_slice(&self.grid.to_le_bytes());
        out.extend_from_slice(&self.temperature.to_le_bytes());
        out.extend_from_slice(&self.variance.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let flat = t.flatten_all()?;
            let code = match t.dtype() {
                DType::F64 => 1u8,
                _ => 0u8,
            };
            out.push(code);
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            if code == 1 {
                for v in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            } else {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..8] != MAGIC {
            return Err(Error::UnsupportedCheckpoint("not a checkpoint file".into()));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body).to_le_bytes() != crc {
            return Err(Error::UnsupportedCheckpoint("checksum mismatch (truncated or corrupt file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedCheckpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let num_kp = r.u32()?;
        let grid = r.u32()?;
        let temperature = r.f64()?;
        let variance = r.f64()?;
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let config_len = r.u32()? as usize;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::UnsupportedCheckpoint("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::UnsupportedCheckpoint("tensor name is not UTF-8".into()))?;
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let t = match code {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(too_large)?)?;
                    let v: Vec<f32> =
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(too_large)?)?;
                    let v: Vec<f64> =
                        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::UnsupportedCheckpoint(format!("unknown dtype code {other}"))),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::UnsupportedCheckpoint("trailing bytes after tensors".into()));
        }
        Ok(Self { num_kp, grid, temperature, variance, step, adam_t, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Core(keymask_core::Error::NotFound(path.to_path_buf()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_bytes(&bytes)
    }

    /// Fails with `ConfigMismatch` unless the file was written for `expect_k` keypoints.
    pub fn expect_kp(&self, expect_k: usize) -> Result<()> {
        if self.num_kp as usize != expect_k {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} keypoints, configuration expects {expect_k}",
                self.num_kp
            )));
        }
        Ok(())
    }
}

fn too_large() -> Error {
    Error::UnsupportedCheckpoint("tensor size overflows".into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::UnsupportedCheckpoint("unexpected end of file".into())),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            num_kp: 3,
            grid: 16,
            temperature: 0.1,
            variance: 0.01,
            step: 42,
            adam_t: 42,
            config: "num_kp = 3\n".into(),
            tensors: vec![
                ("a".into(), Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap()),
                ("b".into(), Tensor::new(&[7.0f64], &Device::Cpu).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.config, ck.config);
        let a: Vec<Vec<f32>> = back.tensor("a").unwrap().to_vec2().unwrap();
        assert_eq!(a, vec![vec![1.5, -2.0], vec![0.25, 3.0]]);
        assert_eq!(back.tensor("b").unwrap().dtype(), DType::F64);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert_eq!(err.category(), "UnsupportedCheckpoint");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::UnsupportedCheckpoint(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn kp_guard() {
        assert!(sample().expect_kp(3).is_ok());
        assert_eq!(sample().expect_kp(10).unwrap_err().category(), "ConfigMismatch");
    }
}
