//! Pixel-grid geometry shared by the dataset, model and metrics: binary masks,
//! half-open boxes and detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in half-open pixel coordinates: columns `x_min..x_max`,
/// rows `y_min..y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Invalid(format!(
                "malformed box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self
            .x_max
            .min(other.x_max)
            .saturating_sub(self.x_min.max(other.x_min));
        let h = self
            .y_max
            .min(other.y_max)
            .saturating_sub(self.y_min.max(other.y_min));
        w * h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }
}

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Invalid(format!(
                "mask of {}x{} needs {} bits, got {}",
                width,
                height,
                width * height,
                bits.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            bits,
        }
    }

    /// Mask covering exactly `b` (clipped to the raster).
    pub fn from_box(width: usize, height: usize, b: &BBox) -> Self {
        Mask::from_fn(width, height, |x, y| b.contains(x, y))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounds of the set pixels; `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut out: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                out = Some(match out {
                    None => BBox {
                        x_min: x,
                        y_min: y,
                        x_max: x + 1,
                        y_max: y + 1,
                    },
                    Some(b) => BBox {
                        x_min: b.x_min.min(x),
                        y_min: b.y_min.min(y),
                        x_max: b.x_max.max(x + 1),
                        y_max: b.y_max.max(y + 1),
                    },
                });
            }
        }
        out
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Invalid(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count())
    }

    /// In-place union.
    pub fn merge(&mut self, other: &Mask) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }
}

/// One predicted (or ground-truth) instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: Mask,
    pub bbox: BBox,
    pub confidence: f64,
    pub image_id: usize,
}

impl Detection {
    /// Detection whose box is the tight bounds of `mask`.
    pub fn from_mask(mask: Mask, confidence: f64, image_id: usize) -> Result<Self> {
        let bbox = mask
            .bbox()
            .ok_or_else(|| Error::Invalid("detection mask is empty".into()))?;
        if !confidence.is_finite() {
            return Err(Error::Invalid(format!(
                "confidence {confidence} is not finite"
            )));
        }
        Ok(Detection {
            mask,
            bbox,
            confidence,
            image_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_rules() {
        assert!(BBox::new(2, 0, 2, 3).is_err());
        let a = BBox::new(0, 0, 2, 2).unwrap();
        let b = BBox::new(1, 1, 3, 3).unwrap();
        assert_eq!(a.intersection_area(&b), 1);
        assert_eq!(a.intersection_area(&BBox::new(2, 2, 4, 4).unwrap()), 0);
    }

    #[test]
    fn mask_bounds() {
        let mut m = Mask::new(5, 4);
        assert!(m.bbox().is_none());
        m.set(1, 2, true);
        m.set(3, 1, true);
        assert_eq!(m.bbox(), Some(BBox::new(1, 1, 4, 3).unwrap()));
        assert_eq!(m.count(), 2);
        let full = Mask::from_box(5, 4, &m.bbox().unwrap());
        assert_eq!(full.count(), 6);
        assert_eq!(m.intersection_count(&full).unwrap(), 2);
        assert!(m.union_count(&Mask::new(4, 4)).is_err());
    }
}
