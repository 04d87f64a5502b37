//! Netpbm grayscale I/O.
//!
//! Reads binary (`P5`) and ASCII (`P2`) PGM with maxval 255 and always writes
//! `P5`. Masks use the same container restricted to the values `{0, 255}`.
//! Overlays are written as binary `P6`.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Gray8, RgbImage};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Pgm {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    /// Skips whitespace and `#` comments running to end of line.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
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
            .ok_or_else(|| Error::Pgm {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

/// Parses a `P5` or `P2` file with maxval 255.
pub fn read_pgm(bytes: &[u8]) -> Result<Gray8> {
    let mut cur = Cursor { bytes, pos: 0 };
    let ascii = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P2") => true,
        _ => return Err(cur.err("bad magic, expected P5 or P2")),
    };
    cur.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(cur.err("missing whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Pgm {
            offset: maxval_at,
            reason: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| cur.err("image dimensions overflow"))?;

    let data = if ascii {
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let at = cur.pos;
            let v = cur.number("sample").map_err(|_| Error::Pgm {
                offset: at,
                reason: format!("truncated payload: {} of {count} samples", data.len()),
            })?;
            if v > 255 {
                return Err(Error::Pgm {
                    offset: at,
                    reason: format!("sample {v} exceeds maxval"),
                });
            }
            data.push(v as u8);
        }
        data
    } else {
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(cur.err("missing whitespace after maxval"));
        }
        cur.pos += 1;
        let payload = &bytes[cur.pos..];
        if payload.len() < count {
            return Err(Error::Pgm {
                offset: bytes.len(),
                reason: format!("truncated payload: {} of {count} bytes", payload.len()),
            });
        }
        payload[..count].to_vec()
    };
    Gray8::new(width, height, data)
}

/// Serializes as binary `P5`.
pub fn write_pgm(grid: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend_from_slice(grid.data());
    out
}

pub fn mask_to_gray8(mask: &BinaryMask) -> Gray8 {
    let data = mask.cells().iter().map(|&c| if c { 255 } else { 0 }).collect();
    Gray8::new(mask.width(), mask.height(), data).expect("mask dimensions are consistent")
}

/// Rejects anything other than 0 or 255.
pub fn gray8_to_mask(grid: &Gray8) -> Result<BinaryMask> {
    let cells = grid
        .data()
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            0 => Ok(false),
            255 => Ok(true),
            _ => Err(Error::MaskValue { index, value }),
        })
        .collect::<Result<Vec<_>>>()?;
    BinaryMask::new(grid.width(), grid.height(), cells)
}

pub fn mask_to_pgm(mask: &BinaryMask) -> Vec<u8> {
    write_pgm(&mask_to_gray8(mask))
}

pub fn pgm_to_mask(bytes: &[u8]) -> Result<BinaryMask> {
    gray8_to_mask(&read_pgm(bytes)?)
}

/// Serializes as binary `P6`.
pub fn write_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().flatten());
    out
}
