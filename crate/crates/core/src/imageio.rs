//! Image files: binary PPM (P6, maxval 255) and raw float32 blobs.
//!
//! Blob layout: the 4-byte magic `IMFA`, then little-endian `u32` height,
//! width and channel count, then `H·W·C` little-endian `f32` values in
//! row-major order. Blobs round-trip bit-exactly; PPM quantizes to 8 bits.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pyramid::Image;

pub const BLOB_MAGIC: &[u8; 4] = b"IMFA";
const HEADER_LEN: usize = 16;

fn corrupt(msg: impl Into<String>) -> io::Error {
    io::Error::new(ErrorKind::InvalidData, msg.into())
}

pub fn encode_blob(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + img.data().len() * 4);
    out.extend_from_slice(BLOB_MAGIC);
    for v in [img.height(), img.width(), Image::CHANNELS] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> io::Result<Image> {
    if bytes.len() < HEADER_LEN {
        return Err(io::Error::new(ErrorKind::UnexpectedEof, "blob shorter than its header"));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(corrupt("bad blob magic"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (field(0), field(1), field(2));
    if c != Image::CHANNELS {
        return Err(corrupt(format!("expected 3 channels, header says {c}")));
    }
    let want = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c * 4))
        .ok_or_else(|| corrupt("blob dimensions overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != want {
        let kind = if body.len() < want { ErrorKind::UnexpectedEof } else { ErrorKind::InvalidData };
        return Err(io::Error::new(kind, format!("{h}×{w}×{c} blob needs {want} data bytes, found {}", body.len())));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Image::new(h, w, data).map_err(|e| corrupt(e.to_string()))
}

pub fn write_blob(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_blob(img)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes).map_err(|e| Error::io(path, e))
}

/// Quantizes to 8 bits, clamping to `[0, 1]`.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> io::Result<Image> {
    // Header: magic, width, height, maxval, separated by whitespace with
    // optional `#` comments, then exactly one whitespace byte.
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(io::Error::new(ErrorKind::UnexpectedEof, "truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(corrupt(format!("expected P6, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt(format!("bad PPM header field {s}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(corrupt(format!("only maxval 255 is supported, found {maxval}")));
    }
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    let want = w * h * 3;
    if body.len() < want {
        return Err(io::Error::new(ErrorKind::UnexpectedEof, format!("PPM needs {want} pixel bytes, found {}", body.len())));
    }
    let data = body[..want].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(h, w, data).map_err(|e| corrupt(e.to_string()))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads either format, chosen by the leading magic bytes.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = if bytes.starts_with(BLOB_MAGIC) {
        decode_blob(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        Err(corrupt("unrecognized image format (expected IMFA blob or P6 PPM)"))
    };
    decoded.map_err(|e| Error::io(path, e))
}
