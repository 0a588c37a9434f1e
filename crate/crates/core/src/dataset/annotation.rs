use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{BBox, Mask};

use super::raster::rasterize_polygon;

/// One labelled instance: its polygon in normalised coordinates plus the
/// derived raster mask and tight box.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub class_id: u32,
    pub polygon: Vec<(f64, f64)>,
    pub mask: Mask,
    pub bbox: BBox,
}

impl InstanceAnnotation {
    pub fn new(
        class_id: u32,
        polygon: Vec<(f64, f64)>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if let Some(&(x, y)) = polygon
            .iter()
            .find(|(x, y)| !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y))
        {
            return Err(Error::Invalid(format!(
                "vertex ({x}, {y}) lies outside [0,1]"
            )));
        }
        let mask = rasterize_polygon(&polygon, width, height)?;
        let bbox = mask
            .bbox()
            .expect("rasterize_polygon never returns an empty mask");
        Ok(InstanceAnnotation {
            class_id,
            polygon,
            mask,
            bbox,
        })
    }
}

/// Parses the `class x1 y1 ... xn yn` text format. `source` names the input in
/// error messages; blank lines are skipped.
pub fn parse_annotations(
    text: &str,
    source: &str,
    width: usize,
    height: usize,
) -> Result<Vec<InstanceAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fail = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let Some(class) = fields.next() else {
            continue;
        };
        let class_id: u32 = class
            .parse()
            .map_err(|_| fail(format!("class id `{class}` is not a non-negative integer")))?;
        let coords = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fail(format!("`{f}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if coords.len() % 2 != 0 {
            return Err(fail(format!(
                "odd number of coordinates ({})",
                coords.len()
            )));
        }
        if coords.len() < 6 {
            return Err(fail(format!(
                "polygon needs at least 3 points, got {}",
                coords.len() / 2
            )));
        }
        if let Some(v) = coords.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(fail(format!("coordinate {v} lies outside [0,1]")));
        }
        let polygon = coords.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        out.push(
            InstanceAnnotation::new(class_id, polygon, width, height)
                .map_err(|e| fail(e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn load_annotations(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
) -> Result<Vec<InstanceAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string(), width, height)
}

/// One line per instance, coordinates with six decimals.
pub fn format_annotations<'a>(items: impl IntoIterator<Item = (u32, &'a [(f64, f64)])>) -> String {
    let mut s = String::new();
    for (class_id, polygon) in items {
        let _ = write!(s, "{class_id}");
        for (x, y) in polygon {
            let _ = write!(s, " {x:.6} {y:.6}");
        }
        s.push('\n');
    }
    s
}

pub fn save_annotations(path: impl AsRef<Path>, annotations: &[InstanceAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let text = format_annotations(
        annotations
            .iter()
            .map(|a| (a.class_id, a.polygon.as_slice())),
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
