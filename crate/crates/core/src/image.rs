//! 8-bit rasters, [0, 1] normalization and lossless PNG I/O.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::fsutil;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("png encode failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    UnsupportedPng(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    samples: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, samples: Vec<u8>) -> Result<Self, ImageError> {
        if !matches!(channels, 1 | 3) {
            return Err(ImageError::InvalidRaster(format!("{channels} channels")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if samples.len() != expected {
            return Err(ImageError::InvalidRaster(format!(
                "{} samples for {width}x{height}x{channels}",
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, ImageError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    /// Channel values of pixel `(x, y)`.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.samples[i..i + c]
    }

    /// Iterates pixels as channel slices in row-major order.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, u8> {
        self.samples.chunks_exact(self.channels as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub values: Vec<f64>,
}

/// Scales every sample to `sample / 255`.
pub fn normalize(img: &RasterImage) -> NormalizedImage {
    NormalizedImage {
        width: img.width,
        height: img.height,
        channels: img.channels,
        values: img.samples.iter().map(|&v| v as f64 / 255.0).collect(),
    }
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&img.samples)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Decodes 8-bit grayscale or RGB PNGs. Other layouts are rejected rather
/// than converted so that round-trips stay exact.
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedPng(format!("bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(ImageError::UnsupportedPng(format!("color type {other:?}"))),
    };
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    RasterImage::new(frame.width, frame.height, channels, buf)
}

/// Reads only the PNG header and returns `(width, height)`.
pub fn png_dimensions(path: &Path) -> Result<(u32, u32), ImageError> {
    let file = std::fs::File::open(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = png::Decoder::new(std::io::BufReader::new(file)).read_info()?;
    let info = reader.info();
    Ok((info.width, info.height))
}

/// Writes `img` as PNG atomically.
pub fn write_png(img: &RasterImage, path: &Path) -> Result<(), ImageError> {
    let bytes = encode_png(img)?;
    fsutil::write_atomic(path, &bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_png(path: &Path) -> Result<RasterImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        let img = RasterImage::new(2, 1, 1, vec![0, 255]).unwrap();
        assert_eq!(normalize(&img).values, vec![0.0, 1.0]);
        let img = RasterImage::new(1, 1, 1, vec![51]).unwrap();
        assert_eq!(normalize(&img).values, vec![0.2]);
    }

    #[test]
    fn png_gray_roundtrip() {
        let img = RasterImage::new(2, 2, 1, vec![0, 64, 128, 255]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn png_rgb_roundtrip() {
        let img = RasterImage::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.pixel(0, 0), &[255, 0, 0]);
    }

    #[test]
    fn png_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RasterImage::new(3, 2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        write_png(&img, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
        assert_eq!(png_dimensions(&path).unwrap(), (3, 2));
    }

    #[test]
    fn bad_raster_shapes() {
        assert!(RasterImage::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(RasterImage::new(2, 2, 1, vec![0; 3]).is_err());
    }

    #[test]
    fn rgba_png_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3, 4]).unwrap();
        }
        assert!(matches!(decode_png(&out), Err(ImageError::UnsupportedPng(_))));
    }
}
