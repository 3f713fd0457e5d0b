//! 8-bit images, binary PPM/PGM files, and bilinear sampling.
//!
//! Frames are stored interleaved row-major (`y * width + x` pixels, channels
//! innermost). Continuous coordinates put pixel (i, j)'s center at
//! (i + 0.5, j + 0.5), so a w x h image spans [0, w] x [0, h].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::{Result, TrackError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "only gray and RGB supported");
        Self { width, height, channels, data: vec![0; width * height * channels] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample at a continuous frame coordinate, per channel, in
    /// [0, 1] units. Out-of-range coordinates clamp to the edge pixels
    /// (edge replication).
    pub fn sample_bilinear(&self, fx: f64, fy: f64, c: usize) -> f64 {
        let gx = fx - 0.5;
        let gy = fy - 0.5;
        let x0 = gx.floor();
        let y0 = gy.floor();
        let tx = gx - x0;
        let ty = gy - y0;
        let xi = |v: f64| (v.max(0.0) as usize).min(self.width - 1);
        let yi = |v: f64| (v.max(0.0) as usize).min(self.height - 1);
        let (x0i, x1i) = (xi(x0), xi(x0 + 1.0));
        let (y0i, y1i) = (yi(y0), yi(y0 + 1.0));
        let p = |x: usize, y: usize| self.get(x, y, c) as f64 / 255.0;
        let top = p(x0i, y0i) * (1.0 - tx) + p(x1i, y0i) * tx;
        let bot = p(x0i, y1i) * (1.0 - tx) + p(x1i, y1i) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Channel-averaged intensity in [0, 1] at an integer pixel.
    pub fn intensity(&self, x: usize, y: usize) -> f64 {
        let mut s = 0.0;
        for c in 0..self.channels {
            s += self.get(x, y, c) as f64;
        }
        s / self.channels as f64 / 255.0
    }

    /// Write binary PPM (3-channel) or PGM (1-channel) depending on the
    /// channel count.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "{}\n{} {}\n255\n", magic, self.width, self.height)?;
        out.extend_from_slice(&self.data);
        fs::write(path, out)?;
        Ok(())
    }

    /// Read a binary P5/P6 file; channel count follows the magic number.
    pub fn read_pnm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path)?;
        let err = |m: &str| TrackError::ImageFormat(format!("{}: {}", path.display(), m));
        let mut pos = 0usize;

        let token = |pos: &mut usize| -> Result<String> {
            // Skip whitespace and # comments between header fields.
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(err("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };

        let magic = token(&mut pos)?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            _ => return Err(err("not a binary PPM/PGM")),
        };
        let width: usize = token(&mut pos)?.parse().map_err(|_| err("bad width"))?;
        let height: usize = token(&mut pos)?.parse().map_err(|_| err("bad height"))?;
        let maxval: usize = token(&mut pos)?.parse().map_err(|_| err("bad maxval"))?;
        if maxval != 255 {
            return Err(err("only maxval 255 supported"));
        }
        pos += 1; // single whitespace byte after maxval
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(err("truncated pixel data"));
        }
        Ok(Image { width, height, channels, data: bytes[pos..pos + need].to_vec() })
    }
}

/// Floating-point crop in planar (channel, y, x) layout, values in [0, 1].
#[derive(Debug, Clone)]
pub struct CropF {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl CropF {
    pub fn new(side: usize, channels: usize) -> Self {
        Self { side, channels, data: vec![0.0; side * side * channels] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.side + y) * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.side + y) * self.side + x] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = Image::new(5, 3, 3);
        for (i, v) in rgb.data.iter_mut().enumerate() {
            *v = (i * 7 % 256) as u8;
        }
        let p = dir.path().join("f.ppm");
        rgb.write_pnm(&p).unwrap();
        assert_eq!(Image::read_pnm(&p).unwrap(), rgb);

        let mut gray = Image::new(4, 6, 1);
        for (i, v) in gray.data.iter_mut().enumerate() {
            *v = (i * 13 % 256) as u8;
        }
        let q = dir.path().join("f.pgm");
        gray.write_pnm(&q).unwrap();
        assert_eq!(Image::read_pnm(&q).unwrap(), gray);
    }

    #[test]
    fn pnm_reader_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        std::fs::write(&p, bytes).unwrap();
        let img = Image::read_pnm(&p).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.data(), &[7, 9]);
    }

    #[test]
    fn bilinear_interpolates_and_clamps() {
        let mut img = Image::new(2, 1, 1);
        img.set(0, 0, 0, 0);
        img.set(1, 0, 0, 255);
        // Midpoint between the two pixel centers.
        assert!((img.sample_bilinear(1.0, 0.5, 0) - 0.5).abs() < 1e-12);
        // At pixel centers, exact values.
        assert!((img.sample_bilinear(0.5, 0.5, 0) - 0.0).abs() < 1e-12);
        assert!((img.sample_bilinear(1.5, 0.5, 0) - 1.0).abs() < 1e-12);
        // Far outside: clamps to the nearest edge pixel.
        assert!((img.sample_bilinear(-3.0, 0.5, 0) - 0.0).abs() < 1e-12);
        assert!((img.sample_bilinear(9.0, 0.5, 0) - 1.0).abs() < 1e-12);
    }
}
