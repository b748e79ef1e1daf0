//! Binary portable anymap I/O (P5 graymaps, P6 pixmaps, maxval 255).
//!
//! Files are written with the header `P5\n<w> <h>\n255\n` (resp. `P6`)
//! followed by raw bytes, rows top to bottom, RGB interleaved for P6.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{}\n{} {}\n255\n", magic, img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::corrupt(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::corrupt(path, format!("unsupported magic {:?}", other))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::corrupt(path, format!("bad header field {:?}", s)));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::corrupt(path, format!("maxval {} not supported", maxval)));
    }
    let need = width * height * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::corrupt(path, format!("expected {} raster bytes, found {}", need, raster.len())));
    }
    Ok(Pnm { width, height, channels, data: raster.to_vec() })
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// `[0, 1]` value to a byte, rounding to nearest.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
