//! Packed image datasets: a 16-byte header followed by raw RGB bytes.
//!
//! Header: `IMDS`, version (u32), count (u32), height (u16), width (u16),
//! all little-endian.

use std::path::Path;

use super::pnm::read_ppm;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const MAGIC: &[u8; 4] = b"IMDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_dataset(images: &[Image]) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("cannot pack an empty dataset".into()))?;
    let (h, w) = first.dims();
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("{h}x{w} exceeds the 16-bit dimension fields")));
    }
    let count = u32::try_from(images.len()).map_err(|_| Error::InvalidArgument("too many images".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + images.len() * first.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, dataset is {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        out.extend_from_slice(img.data());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Image>> {
    let fmt = |m: String| Error::Format(m);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(fmt("not a packed dataset".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().expect("2 bytes")) as usize;
    let version = u32_at(4);
    if version != VERSION {
        return Err(fmt(format!("unsupported dataset version {version}")));
    }
    let (count, h, w) = (u32_at(8) as usize, u16_at(12), u16_at(14));
    let size = h * w * CHANNELS;
    if h == 0 || w == 0 {
        return Err(fmt("zero image dimension".into()));
    }
    if bytes.len() != HEADER_LEN + count * size {
        return Err(fmt(format!(
            "expected {} bytes for {count} {h}x{w} images, found {}",
            HEADER_LEN + count * size,
            bytes.len()
        )));
    }
    bytes[HEADER_LEN..]
        .chunks(size)
        .map(|c| Image::new(h, w, c.to_vec()))
        .collect()
}

pub fn write_dataset(path: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    std::fs::write(path, encode_dataset(images)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    decode_dataset(&std::fs::read(path)?)
}

/// Alias of [`read_dataset`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    read_dataset(path)
}

/// All `.ppm` files of `dir` in lexicographic filename order.
pub fn pack_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no .ppm files in directory".into()));
    }
    let images = paths.iter().map(read_ppm).collect::<Result<Vec<_>>>()?;
    let dims = images[0].dims();
    if let Some((p, img)) = paths.iter().zip(&images).find(|(_, i)| i.dims() != dims) {
        return Err(Error::InvalidArgument(format!(
            "{} is {}x{}, expected {}x{}",
            p.display(),
            img.height(),
            img.width(),
            dims.0,
            dims.1
        )));
    }
    Ok(images)
}

/// `(low, high)` pairs with each low-resolution source the box-filtered
/// downsample of its target.
pub fn superres_pairs(targets: &[Image], factor: usize) -> Result<Vec<(Image, Image)>> {
    targets
        .iter()
        .map(|t| Ok((t.downsample_box(factor)?, t.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::pnm::write_ppm;
    use crate::rng::Rng;

    #[test]
    fn round_trip_and_size() {
        let imgs: Vec<Image> = (0..3).map(|s| Image::random(4, 5, &mut Rng::new(s))).collect();
        let bytes = encode_dataset(&imgs).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * 4 * 5 * 3);
        assert_eq!(decode_dataset(&bytes).unwrap(), imgs);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_dataset(&bad).is_err());
        assert!(encode_dataset(&[]).is_err());
        assert!(encode_dataset(&[imgs[0].clone(), Image::random(5, 4, &mut Rng::new(0))]).is_err());
    }

    #[test]
    fn directory_order_and_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::filled(8, 8, [1, 2, 3]);
        let b = Image::random(8, 8, &mut Rng::new(1));
        write_ppm(dir.path().join("b.ppm"), &b).unwrap();
        write_ppm(dir.path().join("a.ppm"), &a).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let imgs = pack_dir(dir.path()).unwrap();
        assert_eq!(imgs, vec![a.clone(), b]);
        let pairs = superres_pairs(&imgs, 4).unwrap();
        assert_eq!(pairs[0].0, Image::filled(2, 2, [1, 2, 3]));
        write_ppm(dir.path().join("c.ppm"), &Image::filled(4, 4, [0; 3])).unwrap();
        assert!(pack_dir(dir.path()).is_err());
        assert!(pack_dir(tempfile::tempdir().unwrap().path()).is_err());
    }
}
