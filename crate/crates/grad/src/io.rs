//! Binary serialization of a parameter store.
//!
//! Format: `b"KGPW"`, version `u32`, entry count `u64`, then per entry:
//! name length `u32` + UTF-8 bytes, rank `u32`, dims as `u64`s, and the values
//! as little-endian `f64`s in row-major order. Entry order is the store's
//! insertion order, so a round trip preserves it.

use std::io::{self, Read, Write};

use ndarray::{ArrayD, IxDyn};

use crate::nn::Params;

const MAGIC: &[u8; 4] = b"KGPW";
const VERSION: u32 = 1;

pub fn write_params(w: &mut impl Write, ps: &Params) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ps.len() as u64).to_le_bytes())?;
    for (name, value) in ps.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(value.ndim() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let std = value.as_standard_layout();
        for &v in std.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> io::Result<Params> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "not a parameter file"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported parameter file version {version}"),
        ));
    }
    let count = read_u64(r)? as usize;
    let mut ps = Params::new();
    for _ in 0..count {
        let nlen = read_u32(r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-UTF-8 parameter name"))?;
        let rank = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        ps.insert(name, value);
    }
    Ok(ps)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
