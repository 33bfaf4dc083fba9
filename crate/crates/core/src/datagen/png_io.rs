//! 16-bit grayscale PNG storage with the affine map `[-1, 1] -> [0, 65535]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::image::Image;
use crate::error::{FanError, Result};

pub const ENCODING: &str = "png16:affine[-1,1]->[0,65535]";

pub fn to_u16(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

pub fn from_u16(v: u16) -> f64 {
    (f64::from(v) / 65535.0) * 2.0 - 1.0
}

pub fn write_png16(img: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| FanError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| FanError::format(path, e.to_string()))?;
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .flat_map(|&p| to_u16(p).to_be_bytes())
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| FanError::format(path, e.to_string()))?;
    writer
        .finish()
        .map_err(|e| FanError::format(path, e.to_string()))
}

/// Reads an 8- or 16-bit grayscale, gray+alpha, RGB or RGBA PNG. Color
/// inputs are averaged to gray.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| FanError::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec
        .read_info()
        .map_err(|e| FanError::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FanError::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| FanError::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(FanError::format(path, "indexed PNG not supported"));
        }
    };
    let gray_channels = if channels >= 3 { 3 } else { 1 };
    let sample = |i: usize| -> f64 {
        match info.bit_depth {
            png::BitDepth::Sixteen => from_u16(u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]])),
            _ => f64::from(buf[i]) / 255.0 * 2.0 - 1.0,
        }
    };
    let mut px = Vec::with_capacity(w * h);
    for p in 0..w * h {
        let s: f64 = (0..gray_channels).map(|c| sample(p * channels + c)).sum();
        px.push(s / gray_channels as f64);
    }
    Image::from_clamped(h, w, px)
}
