//! Image and scalar-map containers, bilinear lookup, and the on-disk
//! formats: 8-bit PNG for images/masks and a small raw container for depth
//! maps.
//!
//! Depth raw layout (little-endian): magic `CRDD`, `u32` width, `u32` height,
//! `u32` reserved (zero), then `width·height` `f32` values row-major.

use std::io::{self, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("image decode/encode error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("file truncated: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid values: {0}")]
    InvalidValues(String),
}

/// Lookups whose continuous pixel coordinate is this close to a pixel center
/// snap onto it. Rays through pixel centers then read exactly that pixel
/// despite rounding in the projection.
pub const PIXEL_SNAP: f64 = 1e-3;

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < PIXEL_SNAP {
        r
    } else {
        v
    }
}

/// Corner indices and weights for a bilinear lookup at continuous
/// `(row, col)`, clamped to the image.
#[inline]
pub fn bilinear_taps(width: usize, height: usize, row: f64, col: f64) -> [(usize, f64); 4] {
    let r = snap(row).clamp(0.0, (height - 1) as f64);
    let c = snap(col).clamp(0.0, (width - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(height - 1);
    let c1 = (c0 + 1).min(width - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    [
        (r0 * width + c0, (1.0 - fr) * (1.0 - fc)),
        (r0 * width + c1, (1.0 - fr) * fc),
        (r1 * width + c0, fr * (1.0 - fc)),
        (r1 * width + c1, fr * fc),
    ]
}

/// Single-channel `f32` map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch(format!(
                "{}x{} map needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn bilinear(&self, row: f64, col: f64) -> f64 {
        bilinear_taps(self.width, self.height, row, col).iter().map(|&(i, w)| w * self.data[i] as f64).sum()
    }

    /// Writes the depth raw container.
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        w.write_all(b"CRDD")?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 {
            return Err(ImageError::Truncated { expected: 16, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &magic != b"CRDD" {
            return Err(ImageError::BadMagic { expected: *b"CRDD", found: magic });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (width, height) = (word(4), word(8));
        let expected = width * height * 4;
        let payload = &bytes[16..];
        if payload.len() != expected {
            return Err(ImageError::Truncated { expected, found: payload.len() });
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Self::new(width, height, data)
    }

    pub fn save_raw(&self, path: &Path) -> Result<(), ImageError> {
        self.write_raw(io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_raw(path: &Path) -> Result<Self, ImageError> {
        Self::read_raw(io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Grayscale PNG in `[0, 1]`, e.g. a foreground mask.
    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_luma32f();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::L8)?;
        Ok(())
    }
}

/// RGB `f32` image in `[0, 1]`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::SizeMismatch(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn bilinear(&self, row: f64, col: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, w) in bilinear_taps(self.width, self.height, row, col) {
            if w != 0.0 {
                for k in 0..3 {
                    out[k] += w * self.data[3 * i + k] as f64;
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    /// 8-bit PNG, values clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "psnr needs equally sized images");
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
