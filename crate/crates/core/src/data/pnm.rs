//! Binary netpbm: P6 (RGB) and P5 (gray), maxval 255.
//!
//! Samples convert as `v / 255` on load and `round(x * 255)` (clamped) on
//! save, so save-after-load reproduces the original bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub fn to_byte(x: f32) -> u8 {
    if x.is_nan() {
        0
    } else {
        (x * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

fn encode(img: &Image, magic: &str, channels: usize) -> Result<Vec<u8>> {
    if img.channels != channels {
        return Err(Error::shape(
            "pnm",
            format!("{magic} needs {channels} channel(s), image has {}", img.channels),
        ));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    encode(img, "P6", 3)
}

pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    encode(img, "P5", 1)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            format: self.format,
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                format: self.format,
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

fn decode(buf: &[u8], magic: &[u8; 2], channels: usize, format: &'static str) -> Result<Image> {
    let mut c = Cursor { buf, pos: 0, format };
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(c.err(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(c.err(format!("maxval {maxval} unsupported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero image extent"));
    }
    match buf.get(c.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => c.pos += 1,
        _ => return Err(c.err("expected one whitespace byte before the payload")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.err("image size overflows"))?;
    let have = buf.len() - c.pos;
    if have < need {
        return Err(c.err(format!("truncated payload: expected {need} bytes, got {have}")));
    }
    if have > need {
        c.pos += need;
        return Err(c.err(format!("{} trailing bytes after payload", have - need)));
    }
    let data = buf[c.pos..].iter().map(|&b| from_byte(b)).collect();
    Image::new(width, height, channels, data)
}

pub fn decode_ppm(buf: &[u8]) -> Result<Image> {
    decode(buf, b"P6", 3, "ppm")
}

pub fn decode_pgm(buf: &[u8]) -> Result<Image> {
    decode(buf, b"P5", 1, "pgm")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read(path)?).map_err(|e| e.context(path.display().to_string()))
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    decode_pgm(&read(path)?).map_err(|e| e.context(path.display().to_string()))
}

/// Write via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_ppm(img)?)
}

pub fn save_pgm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_pgm(img)?)
}
