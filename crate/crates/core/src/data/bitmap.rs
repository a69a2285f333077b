use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BACKGROUND: u8 = 255;
pub const INK: u8 = 0;

/// 8-bit grayscale image, dark ink on a light background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Bitmap {
    pub fn blank(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![BACKGROUND; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bounding box `(x0, y0, x1, y1)` (exclusive ends) of non-background
    /// pixels, or `None` for a blank image.
    pub fn ink_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != BACKGROUND {
                    let b = bounds.get_or_insert((x, y, x + 1, y + 1));
                    b.0 = b.0.min(x);
                    b.1 = b.1.min(y);
                    b.2 = b.2.max(x + 1);
                    b.3 = b.3.max(y + 1);
                }
            }
        }
        bounds
    }

    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut out = Self::blank(x1 - x0, y1 - y0);
        for y in y0..y1 {
            out.pixels[(y - y0) * out.width..(y - y0 + 1) * out.width]
                .copy_from_slice(&self.pixels[y * self.width + x0..y * self.width + x1]);
        }
        out
    }

    /// Copies `self` into a background canvas at offset (`left`, `top`).
    pub fn embed(&self, width: usize, height: usize, left: usize, top: usize) -> Self {
        assert!(left + self.width <= width && top + self.height <= height, "embed out of bounds");
        let mut out = Self::blank(width, height);
        for y in 0..self.height {
            let dst = (top + y) * width + left;
            out.pixels[dst..dst + self.width].copy_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    /// Model input `[1, H, W]`: inverted and scaled so that ink is 1 and
    /// background is 0.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(&[1, self.height, self.width], |i| S::of(f64::from(255 - self.pixels[i]) / 255.0))
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        if magic.1 != b"P5" {
            return Err(Error::Pgm { offset: magic.0, reason: "expected magic P5".into() });
        }
        let width = parse_number(bytes, &mut pos)?;
        let height = parse_number(bytes, &mut pos)?;
        let maxval_at = pos;
        let maxval = parse_number(bytes, &mut pos)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Pgm { offset: maxval_at, reason: format!("unsupported maxval {maxval}") });
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Pgm { offset: pos, reason: "missing separator before raster".into() });
        }
        pos += 1;
        let need = width * height;
        if bytes.len() - pos < need {
            return Err(Error::Pgm {
                offset: bytes.len(),
                reason: format!("raster needs {need} bytes, found {}", bytes.len() - pos),
            });
        }
        let mut pixels = bytes[pos..pos + need].to_vec();
        if maxval != 255 {
            pixels.iter_mut().for_each(|p| *p = ((*p as usize * 255) / maxval) as u8);
        }
        Ok(Self { width, height, pixels })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|e| match e {
            Error::Pgm { offset, reason } => Error::Pgm { offset, reason: format!("{reason} in {}", path.display()) },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<(usize, &'a [u8])> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm { offset: start, reason: "truncated header".into() });
    }
    Ok((start, &bytes[start..*pos]))
}

fn parse_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let (at, tok) = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Pgm { offset: at, reason: "expected a decimal number".into() })
}
