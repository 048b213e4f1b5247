//! Float RGB images in `[0, 1]`, stored row-major as height × width × channels.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels: CHANNELS,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Clamps to `[0, 1]` and snaps to the 8-bit grid so PNG storage is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize_value(*v);
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("png buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes any supported image, converting to RGB and resizing to `size × size`
    /// when needed.
    pub fn from_encoded(bytes: &[u8], size: usize) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_data(size, size, CHANNELS, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, size: usize) -> Result<Self> {
        Self::from_encoded(&std::fs::read(path)?, size)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}

#[inline]
pub fn quantize_value(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_quantized_images() {
        let mut img = Image::new(4, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.037) % 1.0;
        }
        img.quantize();
        let bytes = img.to_png_bytes().unwrap();
        let back = Image::from_encoded(&bytes, 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn wrong_buffer_length_rejected() {
        assert!(Image::from_data(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
