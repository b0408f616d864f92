//! Little-endian primitives shared by the binary formats.

use std::io::{self, Read, Write};

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64s(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Reads and checks a 4-byte magic plus a `u32` version.
pub fn expect_header(r: &mut impl Read, magic: &[u8; 4], version: u32) -> Result<(), String> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| e.to_string())?;
    if &m != magic {
        return Err(format!("bad magic {m:?}, expected {magic:?}"));
    }
    let v = read_u32(r).map_err(|e| e.to_string())?;
    if v != version {
        return Err(format!("unsupported format version {v} (expected {version})"));
    }
    Ok(())
}

/// Fails if anything follows the expected content.
pub fn expect_eof(r: &mut impl Read) -> Result<(), String> {
    let mut b = [0u8; 1];
    match r.read(&mut b) {
        Ok(0) => Ok(()),
        Ok(_) => Err("trailing bytes".into()),
        Err(e) => Err(e.to_string()),
    }
}
