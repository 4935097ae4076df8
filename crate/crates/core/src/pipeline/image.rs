use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB pixels, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("RawImage::new", "byte count", width * height * 3, data.len()));
        }
        Ok(RawImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RawImage {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decode a binary PPM (P6, maxval 255).
pub fn parse_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut h = Header { bytes, pos: 0 };
    match bytes.get(..2) {
        Some(b"P6") => {}
        Some(b"P3") => return Err(h.err("ASCII PPM (P3) is not supported, only binary P6")),
        _ => return Err(h.err("bad magic, expected P6")),
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(h.err(format!("maxval {maxval} unsupported, only 255")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected a single whitespace byte after maxval"));
    }
    h.pos += 1;
    if width == 0 || height == 0 {
        return Err(h.err("zero-sized image"));
    }
    let need = width * height * 3;
    let body = &bytes[h.pos..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated pixel data: expected {need} bytes, found {}", body.len()),
        });
    }
    RawImage::new(width, height, body[..need].to_vec())
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    parse_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_ppm(img: &RawImage, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
