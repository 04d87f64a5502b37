//! Visual check image: tinted mask, a subsample of the measured chords, and
//! a caption rendered in a tiny bitmap font.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, GrayImage, RgbImage};
use crate::measure::ThicknessReport;

pub const TINT_ALPHA: f64 = 0.4;
pub const TINT: [u8; 3] = [0, 255, 0];
pub const MAX_DRAWN_LINES: usize = 20;
/// Rows reserved at the top for the caption (7-row glyphs plus a 1-row margin).
pub const CAPTION_BAND: usize = 9;

const LINE: [u8; 3] = [0, 0, 0];
const TEXT: [u8; 3] = [255, 255, 255];
const TEXT_BG: [u8; 3] = [0, 0, 0];

/// 5x7 glyphs; bit 4 is the leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        ' ' => [0; 7],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
    }
}

fn blend(gray: u8, tint: u8) -> u8 {
    ((1.0 - TINT_ALPHA) * f64::from(gray) + TINT_ALPHA * f64::from(tint)).round() as u8
}

fn draw_caption(out: &mut RgbImage, caption: &str) {
    let (w, h) = (out.width(), out.height());
    for y in 0..CAPTION_BAND.min(h) {
        for x in 0..w {
            out.set(x, y, TEXT_BG);
        }
    }
    for (i, c) in caption.chars().enumerate() {
        let x0 = 1 + 6 * i;
        if x0 >= w {
            break;
        }
        for (row, bits) in glyph(c).iter().enumerate() {
            let y = 1 + row;
            if y >= h {
                break;
            }
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 && x0 + col < w {
                    out.set(x0 + col, y, TEXT);
                }
            }
        }
    }
}

/// Draws a line between two sub-pixel points, touching only mask pixels.
fn draw_chord(out: &mut RgbImage, mask: &BinaryMask, a: (f64, f64), b: (f64, f64)) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) * 2.0).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x < 0.0 || y < 0.0 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        if x < mask.width() && y < mask.height() && mask.get(x, y) {
            out.set(x, y, LINE);
        }
    }
}

/// Gray image replicated to RGB, mask tinted green, up to
/// [`MAX_DRAWN_LINES`] evenly spaced chords in black, and `caption` in the
/// top band. An empty caption leaves the band untouched.
pub fn render_overlay(
    image: &GrayImage,
    mask: &BinaryMask,
    report: &ThicknessReport,
    caption: &str,
) -> Result<RgbImage> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            actual: mask.dims(),
        });
    }
    let mut out = RgbImage::from_gray(&image.to_gray8());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let g = out.get(x, y)[0];
                out.set(x, y, [blend(g, TINT[0]), blend(g, TINT[1]), blend(g, TINT[2])]);
            }
        }
    }
    let n = report.samples.len();
    let shown = n.min(MAX_DRAWN_LINES);
    for k in 0..shown {
        let s = &report.samples[k * n / shown];
        draw_chord(&mut out, mask, s.upper_hit, s.lower_hit);
    }
    if !caption.is_empty() {
        draw_caption(&mut out, caption);
    }
    Ok(out)
}
