//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Everything crosses the boundary as numbers, byte/float arrays or JSON
//! strings, so the same functions run natively in tests.

use std::collections::BTreeMap;

use attnseg::attention::{self_attention_weights, AttentionBlock, AttentionConfig, AttentionKind};
use attnseg::dataset::{
    format_annotations, render_index, Difficulty, GenConfig, InstanceAnnotation,
};
use attnseg::geom::Mask;
use attnseg::metrics::evaluate;
use attnseg::model::extract_instances;
use attnseg::rng::{stream_id, Pcg32};
use attnseg::tensor::{Tape, Tensor};
use wasm_bindgen::prelude::*;

/// Side of the grid self-attention weights are computed on.
const ATTENTION_GRID: usize = 16;

const PALETTE: [[u8; 3]; 6] = [
    [230, 57, 70],
    [255, 183, 3],
    [42, 157, 143],
    [131, 56, 236],
    [251, 133, 0],
    [58, 134, 255],
];

fn err(e: attnseg::Error) -> String {
    e.to_string()
}

/// One synthetic scene and its instance annotations.
#[wasm_bindgen]
pub struct Scene {
    size: usize,
    image: Tensor,
    annotations: Vec<InstanceAnnotation>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, hard: bool) -> Result<Scene, String> {
        let cfg = GenConfig {
            image_size: size as usize,
            count: 1,
            seed: seed as u64,
            difficulty: if hard {
                Difficulty::Hard
            } else {
                Difficulty::Easy
            },
            ..GenConfig::default()
        };
        cfg.validate().map_err(err)?;
        let (image, annotations) = render_index(&cfg, 0).map_err(err)?;
        Ok(Scene {
            size: cfg.image_size,
            image,
            annotations,
        })
    }

    pub fn size(&self) -> u32 {
        self.size as u32
    }

    pub fn instance_count(&self) -> u32 {
        self.annotations.len() as u32
    }

    /// Label file contents for this scene.
    pub fn annotations_text(&self) -> String {
        format_annotations(
            self.annotations
                .iter()
                .map(|a| (a.class_id, a.polygon.as_slice())),
        )
    }

    /// Row-major RGBA pixels of the scene.
    pub fn image_rgba(&self) -> Vec<u8> {
        let n = self.size * self.size;
        let d = self.image.data();
        let mut out = Vec::with_capacity(4 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((d[c * n + i] * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    /// Scene with each instance mask tinted in its own colour at opacity
    /// `alpha`, and mask boundaries drawn solid.
    pub fn overlay_rgba(&self, alpha: f64) -> Vec<u8> {
        let masks: Vec<&Mask> = self.annotations.iter().map(|a| &a.mask).collect();
        tint(self.image_rgba(), self.size, &masks, alpha.clamp(0.0, 1.0))
    }

    /// Per-pixel gate of an untrained block applied to the scene, `size * size`
    /// values. `coord` and `cbam` give the channel-averaged factor each pixel
    /// is multiplied by; `mhsa` gives the attention weights of the query pixel
    /// `(qx, qy)`, computed on a 16x16 average-pooled copy of the scene.
    pub fn gate_map(&self, kind: &str, seed: u32, qx: u32, qy: u32) -> Result<Vec<f64>, String> {
        match kind {
            "coord" => self.effective_gate(AttentionKind::Coord, seed),
            "cbam" => self.effective_gate(AttentionKind::Cbam, seed),
            "mhsa" => self.attention_row(seed, qx as usize, qy as usize),
            other => Err(format!("unknown gate `{other}` (coord|cbam|mhsa)")),
        }
    }

    /// Simulated prediction for the threshold explorer: the blurred union mask
    /// plus uniform noise of amplitude `noise`, clamped to `[0, 1]`.
    pub fn probability_map(&self, noise: f64, seed: u32) -> Vec<f64> {
        let n = self.size;
        let mut target = vec![0.0; n * n];
        for a in &self.annotations {
            for (t, &b) in target.iter_mut().zip(a.mask.bits()) {
                if b {
                    *t = 1.0;
                }
            }
        }
        let blurred = box_blur(&box_blur(&target, n), n);
        let mut rng = Pcg32::new(seed as u64, stream_id("explorer"));
        blurred
            .iter()
            .map(|&p| (p + noise * rng.uniform(-1.0, 1.0)).clamp(0.0, 1.0))
            .collect()
    }

    /// Instances extracted from [`Scene::probability_map`] at threshold `tau`
    /// and scored against the annotations at match IoU `iou`. Returns the
    /// evaluation report as JSON, with an extra `instances` count.
    pub fn explore(&self, noise: f64, tau: f64, iou: f64, seed: u32) -> Result<String, String> {
        let dets = self.detections(noise, tau, seed)?;
        let count = dets.len();
        let preds = BTreeMap::from([(0usize, dets)]);
        let truth = BTreeMap::from([(0usize, self.annotations.clone())]);
        let config = serde_json::json!({ "noise": noise, "tau": tau, "iou": iou, "seed": seed });
        let report = evaluate(&preds, &truth, iou, config).map_err(err)?;
        let mut v = serde_json::to_value(&report).map_err(|e| e.to_string())?;
        v["instances"] = count.into();
        Ok(v.to_string())
    }

    /// Grey-scale probability map with the extracted instances tinted.
    pub fn explore_rgba(&self, noise: f64, tau: f64, seed: u32) -> Result<Vec<u8>, String> {
        let prob = self.probability_map(noise, seed);
        let grey: Vec<u8> = prob
            .iter()
            .flat_map(|&p| {
                let g = (p * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect();
        let dets = self.detections(noise, tau, seed)?;
        let masks: Vec<&Mask> = dets.iter().map(|d| &d.mask).collect();
        Ok(tint(grey, self.size, &masks, 0.45))
    }
}

impl Scene {
    fn detections(
        &self,
        noise: f64,
        tau: f64,
        seed: u32,
    ) -> Result<Vec<attnseg::geom::Detection>, String> {
        let n = self.size;
        let prob = Tensor::new([1, 1, n, n], self.probability_map(noise, seed)).map_err(err)?;
        extract_instances(&prob, tau, 0).map_err(err)
    }

    fn effective_gate(&self, kind: AttentionKind, seed: u32) -> Result<Vec<f64>, String> {
        let n = self.size;
        let block =
            AttentionBlock::new(AttentionConfig::new(kind, 3), (n, n), seed as u64).map_err(err)?;
        let mut tape = Tape::new();
        let x = tape.constant(self.image.clone());
        let y = block.forward(&mut tape, x).map_err(err)?;
        let (xd, yd) = (self.image.data(), tape.value(y).data());
        let plane = n * n;
        Ok((0..plane)
            .map(|i| {
                let ratios: Vec<f64> = (0..3)
                    .filter(|c| xd[c * plane + i] != 0.0)
                    .map(|c| yd[c * plane + i] / xd[c * plane + i])
                    .collect();
                if ratios.is_empty() {
                    0.0
                } else {
                    ratios.iter().sum::<f64>() / ratios.len() as f64
                }
            })
            .collect())
    }

    fn attention_row(&self, seed: u32, qx: usize, qy: usize) -> Result<Vec<f64>, String> {
        let n = self.size;
        if qx >= n || qy >= n {
            return Err(format!("query ({qx}, {qy}) lies outside the {n}x{n} scene"));
        }
        let g = ATTENTION_GRID.min(n);
        let small = pool(&self.image, n, g);
        let cfg = AttentionConfig::new(AttentionKind::Mhsa, 3).with_heads(1);
        let block = AttentionBlock::new(cfg.clone(), (g, g), seed as u64).map_err(err)?;
        let mut tape = Tape::new();
        let bound = block.params().bind(&mut tape);
        let x = tape.constant(small);
        let w = self_attention_weights(&mut tape, x, &bound.scope("mhsa"), &cfg).map_err(err)?;
        let positions = g * g;
        let query = (qy * g / n) * g + qx * g / n;
        let row = &tape.value(w).data()[query * positions..(query + 1) * positions];
        Ok((0..n * n)
            .map(|i| row[(i / n) * g / n * g + (i % n) * g / n])
            .collect())
    }
}

/// Maps values to RGBA with a blue-to-yellow ramp, scaled to their own range.
#[wasm_bindgen]
pub fn heat_rgba(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .flat_map(|&v| {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
            [lerp(20.0, 253.0), lerp(30.0, 231.0), lerp(120.0, 37.0), 255]
        })
        .collect()
}

fn tint(mut rgba: Vec<u8>, n: usize, masks: &[&Mask], alpha: f64) -> Vec<u8> {
    for (k, m) in masks.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for y in 0..n {
            for x in 0..n {
                if !m.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == n
                    || y + 1 == n
                    || !m.get(x - 1, y)
                    || !m.get(x + 1, y)
                    || !m.get(x, y - 1)
                    || !m.get(x, y + 1);
                let a = if edge { 1.0 } else { alpha };
                let px = &mut rgba[4 * (y * n + x)..4 * (y * n + x) + 3];
                for (p, &c) in px.iter_mut().zip(&colour) {
                    *p = (*p as f64 * (1.0 - a) + c as f64 * a).round() as u8;
                }
            }
        }
    }
    rgba
}

fn box_blur(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (mut sum, mut count) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(n) {
                for xx in x.saturating_sub(1)..(x + 2).min(n) {
                    sum += v[yy * n + xx];
                    count += 1.0;
                }
            }
            out[y * n + x] = sum / count;
        }
    }
    out
}

/// Average-pools a `(1, C, n, n)` image to `(1, C, g, g)`.
fn pool(image: &Tensor, n: usize, g: usize) -> Tensor {
    let [_, c, _, _] = image.shape();
    let bounds = |i: usize| (i * n / g, (i + 1) * n / g);
    let mut out = Vec::with_capacity(c * g * g);
    for ch in 0..c {
        for i in 0..g {
            for j in 0..g {
                let ((y0, y1), (x0, x1)) = (bounds(i), bounds(j));
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += image.at(0, ch, y, x);
                    }
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new([1, c, g, g], out).expect("pooled values are finite")
}
