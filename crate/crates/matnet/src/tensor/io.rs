//! MTN1 tensor container and named-tensor archive.
//!
//! Container record: magic "MTN1", u32 LE rank, rank x u32 LE dims, f32 LE
//! payload. Archive: u32 LE entry count, then per entry a u16 LE name length,
//! UTF-8 name bytes, and a full container record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTN1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().rank() as u32).to_le_bytes())?;
    for d in t.dims() {
        if *d > u32::MAX as usize {
            return Err(Error::Format { what: "tensor record", msg: format!("dim {d} overflows u32") });
        }
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            what: "tensor record",
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let rank = read_u32(r)? as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Format { what: "tensor record", msg: format!("rank {rank} out of 1..=4") });
    }
    let mut dims = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        if d == 0 {
            return Err(Error::Format { what: "tensor record", msg: "zero dimension".into() });
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format { what: "tensor record", msg: "dim overflow".into() })?;
        dims.push(d);
    }
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(Tensor::from_vec(data, &dims))
}

pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Ordered name -> tensor archive (checkpoints use this).
pub fn write_archive<S: Scalar, W: Write>(w: &mut W, entries: &[(String, Tensor<S>)]) -> Result<()> {
    if entries.len() > u32::MAX as usize {
        return Err(Error::Format { what: "archive", msg: "too many entries".into() });
    }
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format { what: "archive", msg: format!("name too long: {name}") });
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_archive<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format { what: "archive", msg: format!("name not UTF-8: {e}") })?;
        let t = read_tensor(r)?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save_archive<S: Scalar>(path: &Path, entries: &[(String, Tensor<S>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_archive<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_archive(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tensor_roundtrip_is_bit_exact_for_f32() {
        let mut rng = Rng::new(11, 0);
        let t: Tensor<f32> = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f32>::zeros(&[2, 2])).unwrap();
        buf[0] = b'X';
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f32>::zeros(&[4, 4])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn archive_roundtrip_preserves_names_and_order() {
        let a: Tensor<f32> = Tensor::full(&[3], 1.5);
        let b: Tensor<f32> = Tensor::full(&[2, 2], -0.25);
        let entries = vec![("alpha".to_string(), a), ("beta.kernel".to_string(), b)];
        let mut buf = Vec::new();
        write_archive(&mut buf, &entries).unwrap();
        let back: Vec<(String, Tensor<f32>)> = read_archive(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[1].0, "beta.kernel");
        assert_eq!(back[1].1.data(), entries[1].1.data());
    }
}
