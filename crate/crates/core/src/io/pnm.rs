//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Splits the header fields off `bytes`, skipping `#` comments, and returns
/// them with the offset of the raster data.
fn header(bytes: &[u8], fields: usize) -> Result<(Vec<String>, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < fields {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(format("truncated header"));
        }
        out.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(format("missing separator after header"));
    }
    Ok((out, i + 1))
}

fn dim(s: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format(format!("bad dimension `{s}`"))),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (f, off) = header(bytes, 4)?;
    match f[0].as_str() {
        "P6" => {}
        "P3" => return Err(format("ASCII pixmaps (P3) are not supported")),
        m => return Err(format(format!("not a binary pixmap: magic `{m}`"))),
    }
    let (w, h) = (dim(&f[1])?, dim(&f[2])?);
    if f[3] != "255" {
        return Err(format(format!("maxval must be 255, got {}", f[3])));
    }
    let need = w * h * 3;
    let data = &bytes[off..];
    if data.len() < need {
        return Err(format(format!("truncated raster: {} of {need} bytes", data.len())));
    }
    Image::new(h, w, data[..need].to_vec()).map_err(|e| format(e.to_string()))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_ppm(img))?;
    Ok(())
}

/// Encodes a `height × width` graymap.
pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values for a {width}x{height} graymap",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[u8]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_pgm(width, height, values)?)?;
    Ok(())
}
