//! Image rasters, PNG/PPM/PGM I/O, crop sampling and PSNR.
//!
//! Samples are stored as `f64` in `[0, 1]`, interleaved row-major
//! (`(y * width + x) * channels + c`). Three-channel data is sRGB-encoded and
//! no gamma linearization is applied anywhere in the crate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default crop side for the preference study at desk scale.
pub const DEFAULT_CROP_SIDE: usize = 256;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated image payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed image header: {0}")]
    BadHeader(String),
    #[error("png codec error: {0}")]
    Png(String),
    #[error("data length {len} does not match {width}x{height}x{channels}")]
    BadLength {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("channel count {0} not supported (expected 1 or 3)")]
    BadChannels(usize),
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("crop side {side} does not fit in {width}x{height} image")]
    CropTooLarge {
        side: usize,
        width: usize,
        height: usize,
    },
}

/// An `height × width × channels` raster of samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannels(channels));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::BadLength {
                len: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// A raster with every sample equal to `value`.
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    /// Builds a raster by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height, channels)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Errors unless `other` has the same width, height and channel count.
    pub fn check_same_shape(&self, other: &ImageBuffer) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::ShapeMismatch {
                a: self.shape(),
                b: other.shape(),
            });
        }
        Ok(())
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// One channel plane as a contiguous `height × width` vector.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Replicates a single-channel raster into three channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// Placement of a square crop inside a source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub origin_x: usize,
    pub origin_y: usize,
    pub side: usize,
    pub flip_horizontal: bool,
}

impl CropSpec {
    /// Cuts the crop out of `img`, mirroring it when `flip_horizontal` is set.
    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
        if self.side == 0
            || self.origin_x + self.side > img.width
            || self.origin_y + self.side > img.height
        {
            return Err(ImageError::CropTooLarge {
                side: self.side,
                width: img.width,
                height: img.height,
            });
        }
        Ok(ImageBuffer::from_fn(self.side, self.side, img.channels, |x, y, c| {
            let sx = if self.flip_horizontal {
                self.side - 1 - x
            } else {
                x
            };
            img.get(self.origin_x + sx, self.origin_y + y, c)
        }))
    }
}

/// Draws a uniformly placed square crop; the horizontal flip is a fair coin.
pub fn sample_crop(img: &ImageBuffer, seed: u64, side: usize) -> Result<CropSpec, ImageError> {
    sample_crop_in(img.width, img.height, seed, side)
}

/// [`sample_crop`] for callers that only know the image dimensions.
pub fn sample_crop_in(
    width: usize,
    height: usize,
    seed: u64,
    side: usize,
) -> Result<CropSpec, ImageError> {
    if side == 0 || side > width || side > height {
        return Err(ImageError::CropTooLarge {
            side,
            width,
            height,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin_x = rng.random_range(0..=width - side);
    let origin_y = rng.random_range(0..=height - side);
    let flip_horizontal = rng.random_bool(0.5);
    Ok(CropSpec {
        origin_x,
        origin_y,
        side,
        flip_horizontal,
    })
}

/// Peak signal-to-noise ratio for unit dynamic range. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, ImageError> {
    a.check_same_shape(b)?;
    let n = a.data.len() as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Maps a sample to an 8-bit value with round-half-up.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn to_bytes_u8(img: &ImageBuffer) -> Vec<u8> {
    img.data.iter().map(|&v| quantize_u8(v)).collect()
}

pub fn from_bytes_u8(
    width: usize,
    height: usize,
    channels: usize,
    bytes: &[u8],
) -> Result<ImageBuffer, ImageError> {
    ImageBuffer::new(
        width,
        height,
        channels,
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|source| ImageError::Unreadable {
            path: path.to_owned(),
            source,
        })?;
    decode_image(&bytes)
}

/// Decodes PNG, binary PPM (P6) or binary PGM (P5) from memory.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_pnm(bytes, 3)
    } else if bytes.starts_with(b"P5") {
        decode_pnm(bytes, 1)
    } else {
        let head: String = bytes
            .iter()
            .take(4)
            .map(|b| format!("{b:02x}"))
            .collect();
        Err(ImageError::UnsupportedFormat(format!("magic bytes {head}")))
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<ImageBuffer, ImageError> {
    // Header: magic, width, height, maxval, separated by whitespace and
    // '#' comments, followed by exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImageError::BadHeader("header ends early".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::BadHeader("expected a decimal field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::BadHeader("field out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::BadHeader("missing separator after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::BadHeader(format!("maxval {maxval}")));
    }
    let wide = maxval > 255;
    let samples = width * height * channels;
    let expected = samples * if wide { 2 } else { 1 };
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let scale = if wide { 65535.0 } else { 255.0 };
    let data = if wide {
        payload[..expected]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / scale)
            .collect()
    } else {
        payload[..expected].iter().map(|&b| b as f64 / scale).collect()
    };
    Ok(ImageBuffer::new(width, height, channels, data)?.clamped())
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let stride_bytes = if wide { 2 } else { 1 };
    let read = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0
        } else {
            buf[i] as f64 / 255.0
        }
    };
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgb | png::ColorType::Rgba => 3,
        other => return Err(ImageError::UnsupportedFormat(format!("png {other:?}"))),
    };
    let row_samples = info.line_size / stride_bytes;
    let mut data = Vec::with_capacity(width * height * channels);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                data.push(read(y * row_samples + x * src_channels + c));
            }
        }
    }
    ImageBuffer::new(width, height, channels, data)
}

fn png_err(e: png::DecodingError) -> ImageError {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            ImageError::Truncated {
                expected: 0,
                found: 0,
            }
        }
        other => ImageError::Png(other.to_string()),
    }
}

/// Writes an 8-bit image; the format follows the extension (`.png`, `.ppm`,
/// `.pgm`, `.pnm`).
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img)?,
        "ppm" | "pgm" | "pnm" => encode_pnm(img),
        other => {
            return Err(ImageError::UnsupportedFormat(format!(
                "extension '{other}'"
            )))
        }
    };
    let unwritable = |source| ImageError::Unwritable {
        path: path.to_owned(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(unwritable)?);
    w.write_all(&bytes).map_err(unwritable)?;
    w.flush().map_err(unwritable)
}

/// P6 for three channels, P5 for one.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(to_bytes_u8(img));
    out
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| ImageError::Png(e.to_string()))?;
        writer
            .write_image_data(&to_bytes_u8(img))
            .map_err(|e| ImageError::Png(e.to_string()))?;
        writer.finish().map_err(|e| ImageError::Png(e.to_string()))?;
    }
    Ok(out)
}
