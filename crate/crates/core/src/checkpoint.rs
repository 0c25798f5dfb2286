//! Versioned container of named tensors.
//!
//! Layout: the 7-byte magic `HTANSPD`, a little-endian `u32` format version,
//! then for each tensor until end of input: `u32` name length, UTF-8 name,
//! `u32` rank, `rank × u64` dims, `numel × f64` values, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"HTANSPD";
pub const VERSION: u32 = 1;

/// Writes `tensors` in order.
pub fn write_container<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&u32::try_from(bytes.len()).map_err(|_| Error::Format("name too long".into()))?.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads every tensor of a container.
pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 7];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::DimMismatch {
            field: "version".into(),
            expected: VERSION as usize,
            found: version as usize,
        });
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        // clean end of input between records
        match r.read(&mut len[..1])? {
            0 => break,
            _ => read_exact_or(&mut r, &mut len[1..], "name length")?,
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        read_exact_or(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor '{name}' has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact_or(&mut r, &mut b, "dims")?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
        let mut bytes = vec![0u8; numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?];
        read_exact_or(&mut r, &mut bytes, "values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_container(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_container(BufReader::new(File::open(path)?))
}
