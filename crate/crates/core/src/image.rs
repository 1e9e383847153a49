//! Grayscale page images and portable graymap (PGM) I/O.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad pgm file: {0}")]
    BadPgm(String),
}

/// Grayscale pixel grid with intensities in [0, 1] (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Binary PGM (P5), maxval 255. Ink is written dark on white paper.
    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (255.0 - v * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        // header: three whitespace-separated fields after the magic
        let mut pos = 0;
        let mut fields: Vec<String> = Vec::new();
        while fields.len() < 4 && pos < raw.len() {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
        }
        if fields.len() < 4 || fields[0] != "P5" {
            return Err(ImageError::BadPgm("expected P5 header".into()));
        }
        let width: usize = fields[1]
            .parse()
            .map_err(|_| ImageError::BadPgm("bad width".into()))?;
        let height: usize = fields[2]
            .parse()
            .map_err(|_| ImageError::BadPgm("bad height".into()))?;
        if fields[3] != "255" {
            return Err(ImageError::BadPgm("maxval must be 255".into()));
        }
        pos += 1; // single whitespace after maxval
        if raw.len() < pos + width * height {
            return Err(ImageError::BadPgm("truncated pixel data".into()));
        }
        let pixels = raw[pos..pos + width * height]
            .iter()
            .map(|&b| (255 - b) as f64 / 255.0)
            .collect();
        Ok(Image {
            width,
            height,
            pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let mut img = Image::new(7, 5);
        img.set(0, 0, 1.0);
        img.set(6, 4, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        img.write_pgm(&path).unwrap();
        let back = Image::read_pgm(&path).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(back.get(0, 0), 1.0);
        assert!((back.get(6, 4) - 0.5).abs() < 1.0 / 255.0);
        assert_eq!(back.get(3, 3), 0.0);
    }
}
