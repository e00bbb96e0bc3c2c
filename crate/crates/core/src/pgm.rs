//! 8-bit binary PGM (P5) export.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// `round(255 * clamp(v, 0, 1))`.
pub fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn encode_pgm(img: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Linearly rescales to [0, 1] by the image maximum before export. Used for
/// non-negative maps such as per-pixel variance.
pub fn write_heatmap_pgm(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    let (_, hi) = img.min_max();
    let scaled = if hi > 0.0 { img.map(|v| v / hi) } else { img.clone() };
    write_pgm(path, &scaled)
}
