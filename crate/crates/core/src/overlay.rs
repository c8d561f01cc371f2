//! Colour overlays of label maps on greyscale images.
//!
//! Class 1 is blue, class 2 red and class 3 green, each blended over the
//! image at 50 %. Ignore pixels get a yellow diagonal hatch.

use std::path::Path;

use crate::error::Result;
use crate::imaging::io::save_rgb;
use crate::imaging::{Image, LabelMap, IGNORE_LABEL};

pub const CLASS_COLORS: [[u8; 3]; 3] = [[0, 0, 255], [255, 0, 0], [0, 255, 0]];
pub const IGNORE_COLOR: [u8; 3] = [255, 255, 0];
pub const OVERLAY_ALPHA: f64 = 0.5;

fn color_of(label: u8, x: usize, y: usize) -> Option<[u8; 3]> {
    match label {
        1..=3 => Some(CLASS_COLORS[label as usize - 1]),
        IGNORE_LABEL if (x + y) % 4 < 2 => Some(IGNORE_COLOR),
        _ => None,
    }
}

/// Interleaved RGB bytes of the overlay.
pub fn overlay_rgb(img: &Image, labels: &LabelMap) -> Result<Vec<u8>> {
    img.check_same_shape(labels.shape())?;
    let mut out = Vec::with_capacity(img.len() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let grey = img.get(x, y) * 255.0;
            match color_of(labels.get(x, y), x, y) {
                Some(c) => out.extend(c.iter().map(|&v| {
                    ((1.0 - OVERLAY_ALPHA) * grey + OVERLAY_ALPHA * v as f64).round() as u8
                })),
                None => out.extend([grey.round() as u8; 3]),
            }
        }
    }
    Ok(out)
}

pub fn render_overlay(img: &Image, labels: &LabelMap, out: impl AsRef<Path>) -> Result<()> {
    let rgb = overlay_rgb(img, labels)?;
    save_rgb(img.width(), img.height(), rgb, out.as_ref())
}
