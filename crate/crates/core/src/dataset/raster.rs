use crate::error::{Error, Result};
use crate::geom::Mask;

/// Even-odd fill of a polygon given in normalised `[0,1]` coordinates onto a
/// `width x height` raster, sampled at pixel centres `(x + 0.5, y + 0.5)`.
///
/// An edge crosses the scanline through a centre when exactly one endpoint lies
/// on or above it (`y <= cy`); a pixel is inside when an odd number of
/// crossings lie at or left of its centre.
pub fn rasterize_polygon(polygon: &[(f64, f64)], width: usize, height: usize) -> Result<Mask> {
    if polygon.len() < 3 {
        return Err(Error::Invalid(format!(
            "polygon needs at least 3 vertices, got {}",
            polygon.len()
        )));
    }
    let pts: Vec<(f64, f64)> = polygon
        .iter()
        .map(|&(x, y)| (x * width as f64, y * height as f64))
        .collect();
    let mut mask = Mask::new(width, height);
    let mut crossings = Vec::new();
    for row in 0..height {
        let cy = row as f64 + 0.5;
        crossings.clear();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= cy) != (y1 <= cy) {
                crossings.push(edge_x(x0, y0, x1, y1, cy));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            // Columns whose centre lies in [span[0], span[1]).
            let first = (span[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((span[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for col in first..end {
                mask.set(col, row, true);
            }
        }
    }
    if mask.is_empty() {
        return Err(Error::Invalid(
            "polygon is degenerate: it covers no pixel centre".into(),
        ));
    }
    Ok(mask)
}

/// x where the edge `(x0,y0)-(x1,y1)` meets the horizontal line at `cy`.
pub(crate) fn edge_x(x0: f64, y0: f64, x1: f64, y1: f64, cy: f64) -> f64 {
    x0 + (cy - y0) * (x1 - x0) / (y1 - y0)
}

/// Shoelace area of a polygon in pixel units.
pub fn polygon_area(polygon: &[(f64, f64)], width: usize, height: usize) -> f64 {
    let n = polygon.len();
    let mut twice = 0.0;
    for i in 0..n {
        let (x0, y0) = polygon[i];
        let (x1, y1) = polygon[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    (twice / 2.0).abs() * (width * height) as f64
}

/// Perimeter of a polygon in pixel units.
pub fn polygon_perimeter(polygon: &[(f64, f64)], width: usize, height: usize) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| {
            let (x0, y0) = polygon[i];
            let (x1, y1) = polygon[(i + 1) % n];
            ((x1 - x0) * width as f64).hypot((y1 - y0) * height as f64)
        })
        .sum()
}
