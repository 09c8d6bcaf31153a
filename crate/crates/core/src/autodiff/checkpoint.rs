//! GUQW parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `"GUQW"`, version `u16`, tensor count `u32`, then per tensor: name length
//! `u16`, UTF-8 name, rank `u8`, each dim as `u32`, payload as binary32
//! row-major.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GUQW";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint<W: Write>(out: &mut W, tensors: &[(&str, &Tensor)]) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "tensor name too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if buf.len() < n {
        return Err(format!("truncated: wanted {n} bytes, {} left", buf.len()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn decode_checkpoint(mut buf: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let b = &mut buf;
    if take(b, 4)? != MAGIC {
        return Err("bad magic (expected GUQW)".into());
    }
    let version = u16::from_le_bytes(take(b, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(take(b, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(b, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(b, len)?)
            .map_err(|e| format!("tensor name not UTF-8: {e}"))?
            .to_string();
        let rank = take(b, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(b, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(b, numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    if !b.is_empty() {
        return Err(format!("{} trailing bytes", b.len()));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    encode_checkpoint(&mut buf, tensors).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|d| Error::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_encode_is_stable() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 7.0]).unwrap();
        let b = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut first = Vec::new();
        encode_checkpoint(&mut first, &[("enc0.w", &a), ("bias", &b)]).unwrap();
        let back = decode_checkpoint(&first).unwrap();
        assert_eq!(back[0].0, "enc0.w");
        assert!(back[0].1.bits_eq(&a));
        let refs: Vec<(&str, &Tensor)> = back.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut second = Vec::new();
        encode_checkpoint(&mut second, &refs).unwrap();
        assert_eq!(first, second);
        assert_eq!(&first[..4], b"GUQW");
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        assert!(decode_checkpoint(b"GUQDxxxxxx").unwrap_err().contains("magic"));
        let t = Tensor::full(&[3], 1.0);
        let mut buf = Vec::new();
        encode_checkpoint(&mut buf, &[("t", &t)]).unwrap();
        buf.pop();
        assert!(decode_checkpoint(&buf).unwrap_err().contains("truncated"));
    }
}
