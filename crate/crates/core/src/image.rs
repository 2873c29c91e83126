//! 8-bit RGB images and their raster flattening.

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Channel {
        Self::ALL[i]
    }
}

/// One entry of the flattened pixel-channel sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelChannel {
    pub intensity: u8,
    pub row: usize,
    pub col: usize,
    pub channel: Channel,
}

/// RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("image dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(invalid(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("positive dimensions")
    }

    pub fn random(height: usize, width: usize, rng: &mut Rng) -> Self {
        let data = (0..height * width * CHANNELS).map(|_| rng.below(256) as u8).collect();
        Self::new(height, width, data).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of pixel-channel positions.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * CHANNELS + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, v: u8) {
        self.data[(row * self.width + col) * CHANNELS + channel] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Pixels in raster order.
    pub fn pixels(&self) -> Vec<[u8; 3]> {
        self.data.chunks(CHANNELS).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Raster-scan sequence: row-major over pixels, R, G, B within a pixel.
    pub fn flatten_raster(&self) -> Vec<PixelChannel> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, &intensity)| {
                let pix = i / CHANNELS;
                PixelChannel {
                    intensity,
                    row: pix / self.width,
                    col: pix % self.width,
                    channel: Channel::from_index(i % CHANNELS),
                }
            })
            .collect()
    }

    /// Inverse of [`Image::flatten_raster`]; entries may arrive in any order.
    pub fn unflatten(height: usize, width: usize, seq: &[PixelChannel]) -> Result<Self> {
        if seq.len() != height * width * CHANNELS {
            return Err(invalid(format!("sequence of {} entries for {height}x{width}", seq.len())));
        }
        let mut data = vec![0u8; seq.len()];
        let mut seen = vec![false; seq.len()];
        for e in seq {
            if e.row >= height || e.col >= width {
                return Err(Error::IndexOutOfRange {
                    what: "pixel coordinate",
                    index: e.row.max(e.col),
                    limit: height.max(width),
                });
            }
            let ix = (e.row * width + e.col) * CHANNELS + e.channel.index();
            if std::mem::replace(&mut seen[ix], true) {
                return Err(invalid("duplicate position in sequence"));
            }
            data[ix] = e.intensity;
        }
        Image::new(height, width, data)
    }

    /// Area (box-filter) downsample by an integer factor, rounding half away
    /// from zero.
    pub fn downsample_box(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(invalid(format!(
                "{}x{} is not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(h * w * CHANNELS);
        let area = (factor * factor) as f64;
        for r in 0..h {
            for c in 0..w {
                for ch in 0..CHANNELS {
                    let mut sum = 0u32;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            sum += self.get(r * factor + dr, c * factor + dc, ch) as u32;
                        }
                    }
                    out.push((sum as f64 / area).round() as u8);
                }
            }
        }
        Image::new(h, w, out)
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale_nearest(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            return Err(invalid("upscale factor must be positive"));
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = Vec::with_capacity(h * w * CHANNELS);
        for r in 0..h {
            for c in 0..w {
                out.extend(self.pixel(r / factor, c / factor));
            }
        }
        Image::new(h, w, out)
    }
}
