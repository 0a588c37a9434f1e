use std::f64::consts::TAU;

use crate::error::Result;
use crate::geom::BBox;
use crate::rng::Pcg32;
use crate::tensor::Tensor;

use super::annotation::InstanceAnnotation;
use super::{Difficulty, GenConfig, BANDS};

const PLACEMENT_ATTEMPTS: usize = 30;
/// Minimum pixel gap between blobs in easy scenes.
const EASY_GAP: usize = 2;

struct Palette {
    ocean: [f64; BANDS],
    debris: [f64; BANDS],
    noise_amp: f64,
    texture_amp: f64,
    speckle: f64,
}

impl Palette {
    fn draw(rng: &mut Pcg32, difficulty: Difficulty) -> Self {
        let mut ocean = [0.08, 0.22, 0.40];
        for v in &mut ocean {
            *v += rng.uniform(-0.03, 0.03);
        }
        match difficulty {
            Difficulty::Easy => {
                let mut debris = [0.85, 0.82, 0.72];
                for v in &mut debris {
                    *v += rng.uniform(-0.05, 0.05);
                }
                Palette {
                    ocean,
                    debris,
                    noise_amp: 0.03,
                    texture_amp: 0.03,
                    speckle: 0.0,
                }
            }
            Difficulty::Hard => {
                let lift = rng.uniform(0.12, 0.22);
                Palette {
                    ocean,
                    debris: ocean.map(|v| v + lift),
                    noise_amp: 0.06,
                    texture_amp: 0.04,
                    speckle: 0.01,
                }
            }
        }
    }
}

/// Value noise on a `(cells+1)^2` lattice, smoothstep-interpolated at pixel
/// centres, values in `[-1, 1]`.
fn value_noise(rng: &mut Pcg32, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64 * cells as f64;
            let fy = (y as f64 + 0.5) / size as f64 * cells as f64;
            let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
            let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * tx;
            let bottom = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn blob_polygon(rng: &mut Pcg32) -> Vec<(f64, f64)> {
    let r = rng.uniform(0.06, 0.14);
    let cx = rng.uniform(r, 1.0 - r);
    let cy = rng.uniform(r, 1.0 - r);
    let k = rng.range_inclusive(5, 9) as usize;
    let phase = rng.uniform(0.0, TAU);
    (0..k)
        .map(|v| {
            let step = TAU / k as f64;
            let angle = phase + step * v as f64 + rng.uniform(-0.25, 0.25) * step;
            let rad = r * rng.uniform(0.7, 1.3);
            (
                quantize((cx + rad * angle.cos()).clamp(0.0, 1.0)),
                quantize((cy + rad * angle.sin()).clamp(0.0, 1.0)),
            )
        })
        .collect()
}

fn grown(b: &BBox, by: usize) -> BBox {
    BBox {
        x_min: b.x_min.saturating_sub(by),
        y_min: b.y_min.saturating_sub(by),
        x_max: b.x_max + by,
        y_max: b.y_max + by,
    }
}

/// Renders one scene: a `(1, 3, S, S)` image with values on the 8-bit grid
/// `k / 255`, and the polygons of the blobs painted into it.
///
/// The background is two octaves of value noise around an ocean colour. Each
/// blob is a 5-9 vertex star-shaped polygon filled with a debris colour plus a
/// little texture. Easy scenes use a high-contrast debris colour and keep blobs
/// at least two pixels apart; hard scenes use a colour only slightly lighter
/// than the ocean, allow overlap and add unlabelled speckle.
pub fn render_sample(
    rng: &mut Pcg32,
    cfg: &GenConfig,
) -> Result<(Tensor, Vec<InstanceAnnotation>)> {
    let s = cfg.image_size;
    let pal = Palette::draw(rng, cfg.difficulty);
    let coarse = value_noise(rng, s, 4);
    let fine = value_noise(rng, s, 8);

    let wanted = rng.range_inclusive(cfg.min_blobs as u32, cfg.max_blobs as u32) as usize;
    let mut blobs: Vec<InstanceAnnotation> = Vec::new();
    for _ in 0..wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let polygon = blob_polygon(rng);
            let Ok(ann) = InstanceAnnotation::new(0, polygon, s, s) else {
                continue;
            };
            if cfg.difficulty == Difficulty::Easy {
                let zone = grown(&ann.bbox, EASY_GAP);
                if blobs.iter().any(|b| zone.intersection_area(&b.bbox) > 0) {
                    continue;
                }
            }
            blobs.push(ann);
            break;
        }
    }

    let plane = s * s;
    let mut data = vec![0.0; BANDS * plane];
    for p in 0..plane {
        let n = 0.6 * coarse[p] + 0.4 * fine[p];
        for b in 0..BANDS {
            data[b * plane + p] = pal.ocean[b] + pal.noise_amp * n;
        }
    }
    for blob in &blobs {
        for (p, _) in blob.mask.bits().iter().enumerate().filter(|(_, &on)| on) {
            let t = pal.texture_amp * rng.uniform(-1.0, 1.0);
            for b in 0..BANDS {
                data[b * plane + p] = pal.debris[b] + t;
            }
        }
    }
    if pal.speckle > 0.0 {
        for p in 0..plane {
            if rng.next_f64() < pal.speckle {
                for b in 0..BANDS {
                    data[b * plane + p] = pal.debris[b];
                }
            }
        }
    }
    for v in &mut data {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok((Tensor::new([1, BANDS, s, s], data)?, blobs))
}
