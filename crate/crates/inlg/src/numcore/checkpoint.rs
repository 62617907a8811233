//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "INLGCKPT" | u16 version | u32 config length | config UTF-8 bytes
//!   | u32 tensor count | per tensor: u16 name length, name UTF-8, u8 rank,
//!     rank x u32 dims, numel x f32 payload (row-major).
//!
//! The config block is a key=value UTF-8 snippet describing the model that
//! produced the tensors; readers that only care about tensors may skip it.
//! Unknown versions are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"INLGCKPT";
pub const CKPT_VERSION: u16 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_checkpoint(path: &Path, config: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let cfg = config.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::format(format!("tensor name too long: {name}")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        if t.rank() > u8::MAX as usize {
            return Err(Error::format(format!("tensor rank too large: {name}")));
        }
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated checkpoint while reading {what}")))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_format(&mut r, &mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("bad checkpoint magic".to_string()));
    }
    let version = read_u16(&mut r, "version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "unknown checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r, "config length")? as usize;
    let mut cfg = vec![0u8; cfg_len];
    read_exact_or_format(&mut r, &mut cfg, "config block")?;
    let config = String::from_utf8(cfg)
        .map_err(|_| Error::format("config block is not UTF-8".to_string()))?;

    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u16(&mut r, "name length")? as usize;
        let mut nb = vec![0u8; name_len];
        read_exact_or_format(&mut r, &mut nb, "tensor name")?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::format(format!("tensor {i} name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        read_exact_or_format(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact_or_format(&mut r, &mut payload, &format!("payload of {name}"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    // Trailing bytes mean the file does not match its own header.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format(
            "trailing bytes after final tensor".to_string(),
        ));
    }
    Ok(Checkpoint { config, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_tensors() -> Vec<(String, Tensor)> {
        vec![
            (
                "a.weight".to_string(),
                Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -1e7]).unwrap(),
            ),
            (
                "b.bias".to_string(),
                Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            ),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.inlgckpt");
        let tensors = sample_tensors();
        write_checkpoint(&path, "d_model=64\nn_layers=2\n", &tensors).unwrap();

        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.config, "d_model=64\nn_layers=2\n");
        assert_eq!(ck.tensors.len(), 2);
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }

        // Writing the reread tensors again produces identical bytes.
        let path2 = dir.path().join("m2.inlgckpt");
        write_checkpoint(&path2, &ck.config, &ck.tensors).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.inlgckpt");
        write_checkpoint(&path, "", &sample_tensors()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        match read_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.inlgckpt");
        write_checkpoint(&path, "cfg", &sample_tensors()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.inlgckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }
}
