//! Binary PGM (P5) output for reconstructions.

use std::path::Path;

use crate::error::{IoContext, Result};

/// Grayscale images of equal height placed left to right. Values are in
/// `[0, 1]`, row-major, one `(width, pixels)` pair per panel.
pub fn side_by_side(height: usize, panels: &[(usize, &[f32])]) -> Vec<u8> {
    let width: usize = panels.iter().map(|(w, _)| w).sum();
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in 0..height {
        for (w, px) in panels {
            out.extend(
                px[row * w..(row + 1) * w]
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
        }
    }
    out
}

pub fn write_side_by_side(path: &Path, height: usize, panels: &[(usize, &[f32])]) -> Result<()> {
    std::fs::write(path, side_by_side(height, panels)).at(path)
}
