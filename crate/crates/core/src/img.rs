//! Grayscale images and binary PGM (P5) I/O.
//!
//! Pixel values are f32 in [0,1], row-major. Files are written as binary PGM
//! with maxval 255 and no comment lines, so byte-for-byte reproducibility is
//! a matter of deterministic pixel values.

use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), size * size, "pixel count must be size^2");
        Image { size, pixels }
    }

    pub fn filled(size: usize, value: f32) -> Self {
        Image { size, pixels: vec![value; size * size] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.size + col] = value;
    }

    /// Quantize to 8-bit PGM bytes.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.size, self.size);
        let mut bytes = header.into_bytes();
        bytes.extend(self.pixels.iter().map(|&v| quantize(v)));
        bytes
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_pgm_bytes())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Image::from_pgm_bytes(&bytes)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        // Header is exactly four whitespace-separated fields: magic, width,
        // height, maxval, followed by a single whitespace byte and raster data.
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start < pos {
                fields.push(
                    std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?,
                );
            }
        }
        if fields.len() < 4 || fields[0] != "P5" {
            return Err("not a binary PGM (P5) file".into());
        }
        let width: usize = fields[1].parse().map_err(|_| "bad width")?;
        let height: usize = fields[2].parse().map_err(|_| "bad height")?;
        let maxval: usize = fields[3].parse().map_err(|_| "bad maxval")?;
        if width != height {
            return Err(format!("expected square image, got {width}x{height}"));
        }
        if maxval != 255 {
            return Err(format!("expected maxval 255, got {maxval}"));
        }
        pos += 1; // single whitespace after maxval
        let raster = &bytes[pos..];
        if raster.len() != width * height {
            return Err(format!(
                "raster length {} does not match {width}x{height}",
                raster.len()
            ));
        }
        let pixels = raster.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Image { size: width, pixels })
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_header_is_canonical() {
        let img = Image::filled(4, 0.5);
        let bytes = img.to_pgm_bytes();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 4\n255\n".len() + 16);
    }

    proptest! {
        // Quantized round-trip: writing then reading recovers the same bytes.
        #[test]
        fn pgm_roundtrip_is_stable(values in proptest::collection::vec(0.0f32..=1.0, 16)) {
            let img = Image::new(4, values);
            let bytes = img.to_pgm_bytes();
            let back = Image::from_pgm_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_pgm_bytes(), bytes);
        }
    }
}
