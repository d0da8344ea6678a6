//! Binary 8-bit PGM (P5).

use std::path::Path;

use crate::error::{Result, TnrdError};
use crate::image::Image;

fn err(message: impl Into<String>) -> TnrdError {
    TnrdError::parse("PGM", message)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("invalid {what}")))
    }
}

/// Decodes a P5 image; `maxval < 255` is rescaled to `[0, 255]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err("not a binary PGM (expected magic P5)"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err("zero image dimension"));
    }
    if maxval == 0 {
        return Err(err("maxval must be positive"));
    }
    if maxval > 255 {
        return Err(TnrdError::Unsupported(format!(
            "PGM maxval {maxval} (only 8-bit samples are supported)"
        )));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(err("missing whitespace after header")),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| err("image dimensions overflow"))?;
    let data = bytes
        .get(h.pos..h.pos + n)
        .ok_or_else(|| err(format!("truncated pixel data: expected {n} bytes, found {}", bytes.len() - h.pos)))?;
    Image::new(
        width,
        height,
        data.iter()
            .map(|&v| ((v as usize).min(maxval) * 255) as f64 / maxval as f64)
            .collect(),
    )
}

/// Encodes as P5 with samples rounded and clamped to `0..=255`.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| TnrdError::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        TnrdError::Parse { message, .. } => TnrdError::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| TnrdError::io(path, e))
}
