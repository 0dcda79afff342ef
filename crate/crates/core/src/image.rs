//! Dense image buffers plus binary PPM (color) and PFM (depth) I/O.

use crate::geometry::Vec3;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: malformed image ({reason})")]
    Format { path: String, reason: String },
}

/// Row-major 2D buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Grid<Vec3>;
pub type DepthImage = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, col: usize, row: usize) -> &mut T {
        let w = self.width;
        &mut self.data[row * w + col]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl RgbImage {
    /// Bilinear sample at continuous pixel coordinates (pixel centers at integers),
    /// clamped at the border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vec3 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let top = self.get(c0, r0) * (1.0 - fu) + self.get(c1, r0) * fu;
        let bottom = self.get(c0, r1) * (1.0 - fu) + self.get(c1, r1) * fu;
        top * (1.0 - fv) + bottom * fv
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ImageIoError + '_ {
    move |source| ImageIoError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> ImageIoError {
    ImageIoError::Format { path: path.display().to_string(), reason: reason.into() }
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an RGB image as binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 3);
    for px in &img.data {
        out.extend([quantize(px.x), quantize(px.y), quantize(px.z)]);
    }
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), ImageIoError> {
    std::fs::write(path, encode_ppm(img)).map_err(io_err(path))
}

fn read_header_token<R: BufRead>(r: &mut R) -> io::Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Ok(token);
        }
        let c = byte[0] as char;
        if c == '#' && token.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c);
    }
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, ImageIoError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let magic = read_header_token(&mut r).map_err(io_err(path))?;
    if magic != "P6" {
        return Err(format_err(path, format!("expected P6 magic, found {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let tok = read_header_token(&mut r).map_err(io_err(path))?;
        *d = tok.parse().map_err(|_| format_err(path, format!("bad header field {tok:?}")))?;
    }
    let [width, height, maxval] = dims;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    let mut raw = vec![0u8; width * height * 3];
    r.read_exact(&mut raw).map_err(|_| format_err(path, "truncated pixel data"))?;
    let scale = maxval as f64;
    let data = raw
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64 / scale, c[1] as f64 / scale, c[2] as f64 / scale))
        .collect();
    Ok(Grid { width, height, data })
}

/// Writes a single-channel little-endian PFM; rows are stored bottom-up.
pub fn write_pfm(path: &Path, img: &DepthImage) -> Result<(), ImageIoError> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for row in (0..img.height).rev() {
        for col in 0..img.width {
            out.extend((*img.get(col, row) as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<DepthImage, ImageIoError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let magic = read_header_token(&mut r).map_err(io_err(path))?;
    if magic != "Pf" {
        return Err(format_err(path, format!("expected Pf magic, found {magic:?}")));
    }
    let mut next = || -> Result<String, ImageIoError> { read_header_token(&mut r).map_err(io_err(path)) };
    let width: usize = next()?.parse().map_err(|_| format_err(path, "bad width"))?;
    let height: usize = next()?.parse().map_err(|_| format_err(path, "bad height"))?;
    let scale: f64 = next()?.parse().map_err(|_| format_err(path, "bad scale"))?;
    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw).map_err(|_| format_err(path, "truncated pixel data"))?;
    let mut img = Grid::filled(width, height, 0.0);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let row = height - 1 - i / width;
        *img.get_mut(i % width, row) = v as f64;
    }
    Ok(img)
}
