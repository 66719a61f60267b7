//! Zero-dependency raw clip interchange: a 16-byte header (magic and H, W, L
//! as little-endian unsigned 32-bit) followed by frame-major little-endian
//! 32-bit floats — frame by frame, each frame row-major H x W x RGB, values
//! in `[-1, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::data::VideoTensor;
use crate::error::{Error, Result};

const MAGIC: u32 = u32::from_le_bytes(*b"kvr1");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawHeader {
    pub h: u32,
    pub w: u32,
    pub l: u32,
}

pub fn write_raw_clip(path: &Path, video: &VideoTensor) -> Result<()> {
    let (h, w, l) = video.dims();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC.to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(l as u32).to_le_bytes())?;
    for t in 0..l {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = video.pixels[[y, x, t, ch]] as f32;
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_raw_header(path: &Path) -> Result<RawHeader> {
    let mut reader = BufReader::new(File::open(path)?);
    read_header(&mut reader, path)
}

fn read_header(reader: &mut impl Read, path: &Path) -> Result<RawHeader> {
    let mut buf = [0u8; 16];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::ingest(format!("{}: truncated raw clip header", path.display())))?;
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    if word(0) != MAGIC {
        return Err(Error::ingest(format!("{}: not a raw clip file", path.display())));
    }
    Ok(RawHeader { h: word(4), w: word(8), l: word(12) })
}

pub fn read_raw_clip(path: &Path) -> Result<VideoTensor> {
    let mut reader = BufReader::new(File::open(path)?);
    let hdr = read_header(&mut reader, path)?;
    let (h, w, l) = (hdr.h as usize, hdr.w as usize, hdr.l as usize);
    let n = h * w * l * 3;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(Error::ingest(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let mut pixels = Array4::zeros((h, w, l, 3));
    let mut i = 0;
    for t in 0..l {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
                    pixels[[y, x, t, ch]] = v as f64;
                    i += 4;
                }
            }
        }
    }
    Ok(VideoTensor::new(pixels))
}
