//! Scanline polygon fill with the even-odd rule sampled at pixel centres.

use super::Point2;
use crate::error::{invalid_input, Result};

/// Binary coverage grid produced by [`rasterize_polygon`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Sets pixel `(row i, col j)` iff its centre `(j + 0.5, i + 0.5)` lies inside
/// the polygon under the even-odd rule. Pixels outside the grid are clipped.
pub fn rasterize_polygon(vertices: &[Point2], width: usize, height: usize) -> Result<PixelMask> {
    if vertices.len() < 3 {
        return Err(invalid_input(format!(
            "a polygon needs at least 3 vertices, got {}",
            vertices.len()
        )));
    }
    let mut bits = vec![false; width * height];
    fill_spans(vertices, width, height, |row, lo, hi| {
        bits[row * width + lo..row * width + hi].fill(true);
    });
    Ok(PixelMask { width, height, bits })
}

/// Calls `paint(row, col_start, col_end)` for every covered horizontal span.
/// Polygons with fewer than 3 vertices cover nothing.
pub(crate) fn fill_spans(vertices: &[Point2], width: usize, height: usize, mut paint: impl FnMut(usize, usize, usize)) {
    if vertices.len() < 3 || width == 0 {
        return;
    }
    let (min_y, max_y) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.y), b.max(p.y)));
    if !(min_y.is_finite() && max_y.is_finite()) {
        return;
    }
    // rows whose centre can fall in [min_y, max_y)
    let first = (min_y - 0.5).ceil().max(0.0) as usize;
    let last = ((max_y - 0.5).ceil().min(height as f64)).max(0.0) as usize;
    let mut crossings: Vec<f64> = Vec::with_capacity(vertices.len());
    for row in first..last {
        let y = row as f64 + 0.5;
        crossings.clear();
        for (k, &a) in vertices.iter().enumerate() {
            let b = vertices[(k + 1) % vertices.len()];
            // half-open in y: an edge counts when one end is above the scanline
            // and the other is at or below it
            if (a.y > y) != (b.y > y) {
                crossings.push((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // centre x = col + 0.5 is covered iff pair[0] <= x < pair[1]
            let lo = (pair[0] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            let hi = (pair[1] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            if lo < hi {
                paint(row, lo, hi);
            }
        }
    }
}
