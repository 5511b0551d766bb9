//! 8-bit grayscale frames, binary PGM I/O and crop resampling.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        ensure!(width > 0 && height > 0, "frame extents must be positive");
        ensure!(
            pixels.len() == width * height,
            "{}x{} frame needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        );
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    /// Intensity in [0, 1] at integer coordinates, clamped to the border.
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x] as f64 / 255.0
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64
    }

    /// Clamps a point into the frame.
    pub fn clamp_point(&self, p: [f64; 2]) -> [f64; 2] {
        let max_x = self.width as f64 - 1e-6;
        let max_y = self.height as f64 - 1e-6;
        [p[0].clamp(0.0, max_x), p[1].clamp(0.0, max_y)]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        // Header: magic, width, height, maxval as whitespace-separated tokens
        // with optional `#` comments, then one whitespace byte.
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PGM (maxval 255) is supported"));
        }
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if data.len() != w * h {
            return Err(bad("pixel data length does not match header"));
        }
        Self::new(w, h, data.to_vec())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?, path)
    }
}

/// Square region of a frame resampled to `size`×`size` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    /// Centre in frame pixels.
    pub center: [f64; 2],
    /// Side length in frame pixels.
    pub extent: f64,
    /// Output side length in crop pixels.
    pub size: usize,
}

impl CropWindow {
    fn scale(&self) -> f64 {
        self.size as f64 / self.extent
    }

    fn origin(&self) -> [f64; 2] {
        [
            self.center[0] - self.extent / 2.0,
            self.center[1] - self.extent / 2.0,
        ]
    }

    pub fn to_crop(&self, p: [f64; 2]) -> [f64; 2] {
        let o = self.origin();
        [(p[0] - o[0]) * self.scale(), (p[1] - o[1]) * self.scale()]
    }

    pub fn to_frame(&self, p: [f64; 2]) -> [f64; 2] {
        let o = self.origin();
        [p[0] / self.scale() + o[0], p[1] / self.scale() + o[1]]
    }
}

/// Bilinear resampling of `window` with edge-clamped padding; values in [0, 1].
///
/// Crop pixel `(i, j)` samples the frame at the centre of its footprint, so a
/// window with integer centre, even extent and `size == extent` copies pixels
/// exactly.
pub fn crop_bilinear(frame: &Frame, window: &CropWindow) -> Vec<f64> {
    let inv = window.extent / window.size as f64;
    let o = window.origin();
    let mut out = Vec::with_capacity(window.size * window.size);
    for i in 0..window.size {
        let fy = o[1] + (i as f64 + 0.5) * inv - 0.5;
        let (y0, wy) = (fy.floor(), fy - fy.floor());
        for j in 0..window.size {
            let fx = o[0] + (j as f64 + 0.5) * inv - 0.5;
            let (x0, wx) = (fx.floor(), fx - fx.floor());
            let (xi, yi) = (x0 as isize, y0 as isize);
            let v00 = frame.at_clamped(xi, yi);
            let v = if wx == 0.0 && wy == 0.0 {
                v00
            } else {
                let v01 = frame.at_clamped(xi + 1, yi);
                let v10 = frame.at_clamped(xi, yi + 1);
                let v11 = frame.at_clamped(xi + 1, yi + 1);
                (v00 * (1.0 - wx) + v01 * wx) * (1.0 - wy) + (v10 * (1.0 - wx) + v11 * wx) * wy
            };
            out.push(v);
        }
    }
    out
}

/// Separable box blur with border clamping, in place.
pub fn box_blur(values: &mut [f64], width: usize, height: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for d in -(radius as isize)..=radius as isize {
                let xx = (x as isize + d).clamp(0, width as isize - 1) as usize;
                s += values[y * width + xx];
            }
            tmp[y * width + x] = s * norm;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for d in -(radius as isize)..=radius as isize {
                let yy = (y as isize + d).clamp(0, height as isize - 1) as usize;
                s += tmp[yy * width + x];
            }
            values[y * width + x] = s * norm;
        }
    }
}

/// Shifts to zero mean and scales to unit standard deviation (a constant
/// input becomes all zeros).
pub fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        values.fill(0.0);
        return;
    }
    let inv = 1.0 / var.sqrt();
    values.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}
