//! SGV1 volume files.
//!
//! All integers and floats are little-endian. Header (52 bytes):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SGV1`                            |
//! | 4      | 2    | format version (u16, currently 1)       |
//! | 6      | 1    | dtype tag: 1 = float64, 2 = uint8       |
//! | 7      | 1    | reserved, 0                             |
//! | 8      | 12   | dims, 3 x u32 (storage axis 0 first)    |
//! | 20     | 4    | channels (u32)                          |
//! | 24     | 24   | spacing in mm, 3 x f64                  |
//! | 48     | 3    | orientation code, ASCII (e.g. `RAS`)    |
//! | 51     | 1    | reserved, 0                             |
//!
//! The payload follows immediately: `channels * d * h * w` elements,
//! channel-major, axis 2 fastest. Masks are single-channel uint8.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

use super::volume::{Geometry, MaskVolume, Orientation, Volume};

pub const MAGIC: [u8; 4] = *b"SGV1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 52;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F64 = 1,
    U8 = 2,
}

impl Dtype {
    fn from_tag(tag: u8) -> std::result::Result<Self, FormatError> {
        match tag {
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

struct Header {
    geometry: Geometry,
    channels: usize,
    dtype: Dtype,
}

fn encode_header(h: &Header, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(h.dtype as u8);
    out.push(0);
    for d in h.geometry.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(h.channels as u32).to_le_bytes());
    for s in h.geometry.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&h.geometry.orientation.bytes());
    out.push(0);
}

fn u32_at(b: &[u8], o: usize) -> usize {
    u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as usize
}

fn f64_at(b: &[u8], o: usize) -> f64 {
    f64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"))
}

fn decode_header(b: &[u8]) -> std::result::Result<Header, FormatError> {
    if b.len() < 4 {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            available: b.len(),
        });
    }
    let magic: [u8; 4] = b[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    if b.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            available: b.len(),
        });
    }
    let version = u16::from_le_bytes([b[4], b[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version as u32,
            supported: VERSION as u32,
        });
    }
    let dtype = Dtype::from_tag(b[6])?;
    if b[7] != 0 || b[51] != 0 {
        return Err(FormatError::Malformed("reserved header bytes must be zero".into()));
    }
    let dims = [u32_at(b, 8), u32_at(b, 12), u32_at(b, 16)];
    let channels = u32_at(b, 20);
    let spacing = [f64_at(b, 24), f64_at(b, 32), f64_at(b, 40)];
    let code = std::str::from_utf8(&b[48..51])
        .map_err(|_| FormatError::Malformed("orientation code is not ASCII".into()))?;
    let orientation: Orientation = code
        .parse()
        .map_err(|e: Error| FormatError::Malformed(e.to_string()))?;
    let geometry = Geometry::new(dims, spacing, orientation)
        .map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(Header {
        geometry,
        channels,
        dtype,
    })
}

fn payload<'a>(b: &'a [u8], h: &Header) -> std::result::Result<&'a [u8], FormatError> {
    let expected = h
        .channels
        .checked_mul(h.geometry.voxels())
        .and_then(|n| n.checked_mul(h.dtype.size()))
        .ok_or_else(|| FormatError::Malformed("dims overflow".into()))?;
    let found = b.len() - HEADER_LEN;
    if found != expected {
        return Err(FormatError::PayloadSize { expected, found });
    }
    Ok(&b[HEADER_LEN..])
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * v.data.len());
    encode_header(
        &Header {
            geometry: v.geometry,
            channels: v.channels,
            dtype: Dtype::F64,
        },
        &mut out,
    );
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(b: &[u8]) -> Result<Volume> {
    let h = decode_header(b)?;
    if h.dtype != Dtype::F64 {
        return Err(FormatError::Malformed("expected a float64 image, found uint8 mask".into()).into());
    }
    let p = payload(b, &h)?;
    let data = p.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Volume::new(h.geometry, h.channels, data)
}

pub fn encode_mask(m: &MaskVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data.len());
    encode_header(
        &Header {
            geometry: m.geometry,
            channels: 1,
            dtype: Dtype::U8,
        },
        &mut out,
    );
    out.extend_from_slice(&m.data);
    out
}

pub fn decode_mask(b: &[u8]) -> Result<MaskVolume> {
    let h = decode_header(b)?;
    if h.dtype != Dtype::U8 || h.channels != 1 {
        return Err(FormatError::Malformed("expected a single-channel uint8 mask".into()).into());
    }
    let p = payload(b, &h)?;
    MaskVolume::new(h.geometry, p.to_vec()).map_err(|e| FormatError::Malformed(e.to_string()).into())
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_mask(m: &MaskVolume, path: &Path) -> Result<()> {
    fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
