//! Box and mask detection metrics: IoU, greedy matching, precision/recall,
//! F-beta, all-point AP at a fixed IoU threshold, dataset IoU and the
//! evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::InstanceAnnotation;
use crate::error::{Error, Result};
pub use crate::geom::{BBox, Detection, Mask};

pub fn iou_box(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        BBox::new(bx.x_min, bx.y_min, bx.x_max, bx.y_max)?;
    }
    let inter = a.intersection_area(b);
    Ok(inter as f64 / (a.area() + b.area() - inter) as f64)
}

pub fn iou_mask(a: &Mask, b: &Mask) -> Result<f64> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Err(Error::Invalid("IoU of two empty masks is undefined".into()));
    }
    Ok(a.intersection_count(b)? as f64 / union as f64)
}

/// Anything with a box and a mask: predictions and ground truth alike.
pub trait Instance {
    fn bbox(&self) -> &BBox;
    fn mask(&self) -> &Mask;
}

impl Instance for Detection {
    fn bbox(&self) -> &BBox {
        &self.bbox
    }

    fn mask(&self) -> &Mask {
        &self.mask
    }
}

impl Instance for InstanceAnnotation {
    fn bbox(&self) -> &BBox {
        &self.bbox
    }

    fn mask(&self) -> &Mask {
        &self.mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Box,
    Mask,
}

impl IouKind {
    pub fn iou(self, a: &impl Instance, b: &impl Instance) -> Result<f64> {
        match self {
            IouKind::Box => iou_box(a.bbox(), b.bbox()),
            IouKind::Mask => iou_mask(a.mask(), b.mask()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(detection, ground truth, iou)` in the order the matches were made.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_detections.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_truths.len()
    }

    /// `true` at index `d` when detection `d` is matched.
    pub fn is_tp(&self, detections: usize) -> Vec<bool> {
        let mut out = vec![false; detections];
        for &(d, _, _) in &self.matches {
            out[d] = true;
        }
        out
    }
}

/// Indices of `confidences` from highest to lowest; equal confidences keep
/// input order.
pub fn confidence_order(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    order
}

/// Greedy matching: detections are visited by descending confidence and each
/// takes the still-unmatched ground truth with the highest IoU (lowest index
/// on ties) if that IoU reaches `threshold`.
pub fn match_detections<D: Instance, G: Instance>(
    detections: &[D],
    confidences: &[f64],
    truths: &[G],
    kind: IouKind,
    threshold: f64,
) -> Result<MatchResult> {
    if detections.len() != confidences.len() {
        return Err(Error::Invalid(
            "one confidence per detection is required".into(),
        ));
    }
    let mut taken = vec![false; truths.len()];
    let mut out = MatchResult::default();
    for d in confidence_order(confidences) {
        let mut best: Option<(usize, f64)> = None;
        for (g, truth) in truths.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = kind.iou(&detections[d], truth)?;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= threshold => {
                taken[g] = true;
                out.matches.push((d, g, iou));
            }
            _ => out.unmatched_detections.push(d),
        }
    }
    out.unmatched_detections.sort_unstable();
    out.unmatched_truths = (0..truths.len()).filter(|&g| !taken[g]).collect();
    Ok(out)
}

/// Matching of [`Detection`]s using their own confidences.
pub fn match_instances<G: Instance>(
    detections: &[Detection],
    truths: &[G],
    kind: IouKind,
    threshold: f64,
) -> Result<MatchResult> {
    let conf: Vec<f64> = detections.iter().map(|d| d.confidence).collect();
    match_detections(detections, &conf, truths, kind, threshold)
}

/// `(1 + b^2) P R / (b^2 P + R)`, defined as 0 when the denominator is 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// `num / den`, or `None` when `den` is 0.
fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `tp / (tp + fp + fn)`.
pub fn dataset_iou(tp: usize, fp: usize, fn_: usize) -> Result<f64> {
    ratio(tp, tp + fp + fn_)
        .ok_or_else(|| Error::Invalid("dataset IoU of all-zero counts is undefined".into()))
}

/// One scored detection for AP: its confidence, whether it matched, and a key
/// that orders equal confidences (image id, then rank within the image).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub confidence: f64,
    pub tp: bool,
    pub key: (usize, usize),
}

/// Area under the precision-recall curve with all-point interpolation: the
/// precision at each recall step is the maximum precision at any equal or
/// higher recall.
pub fn average_precision(scored: &[Scored], total_truths: usize) -> Result<f64> {
    if total_truths == 0 {
        return Err(Error::Invalid(
            "average precision with no ground truth is undefined".into(),
        ));
    }
    let mut order: Vec<&Scored> = scored.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.key.cmp(&b.key))
    });
    let mut points = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in order {
        if s.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / total_truths as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Metrics for one IoU flavour. Undefined ratios are reported as 0 and named
/// in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub dataset_iou: f64,
    pub undefined: Vec<String>,
}

impl BlockReport {
    fn build(tp: usize, fp: usize, fn_: usize, scored: &[Scored]) -> Self {
        let mut undefined = Vec::new();
        let mut or_zero = |v: Option<f64>, name: &str| {
            v.unwrap_or_else(|| {
                undefined.push(name.to_string());
                0.0
            })
        };
        let precision = or_zero(ratio(tp, tp + fp), "precision");
        let recall = or_zero(ratio(tp, tp + fn_), "recall");
        let ap50 = or_zero(average_precision(scored, tp + fn_).ok(), "ap50");
        let dataset_iou = or_zero(dataset_iou(tp, fp, fn_).ok(), "dataset_iou");
        BlockReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f_beta(precision, recall, 1.0),
            ap50,
            dataset_iou,
            undefined,
        }
    }

    /// `Precision,Recall,mAP_0.5,F1-Score,IoU` values.
    pub fn table_row(&self) -> [f64; 5] {
        [
            self.precision,
            self.recall,
            self.ap50,
            self.f1,
            self.dataset_iou,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "box")]
    pub box_: BlockReport,
    pub mask: BlockReport,
    /// Pixel-level precision/recall of the union of predicted masks against
    /// the union of ground-truth masks, summed over images.
    pub pixel_precision: f64,
    pub pixel_recall: f64,
    pub config: serde_json::Value,
}

pub const CSV_HEADER: &str = "Model,Block,Precision,Recall,mAP_0.5,F1-Score,IoU";

impl EvalReport {
    /// Header plus one row per block, metric columns in table order.
    pub fn to_csv(&self, model: &str) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (name, block) in [("box", &self.box_), ("mask", &self.mask)] {
            let _ = write!(s, "{model},{name}");
            for v in block.table_row() {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

fn union_of<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Option<Mask>> {
    let mut out: Option<Mask> = None;
    for m in masks {
        match &mut out {
            None => out = Some(m.clone()),
            Some(u) => u.merge(m)?,
        }
    }
    Ok(out)
}

/// Evaluates per-image predictions against per-image ground truth. Both maps
/// must have the same image ids. Matching runs per image, once with box IoU and
/// once with mask IoU; AP ranks all detections of the dataset together.
pub fn evaluate<G: Instance>(
    predictions: &BTreeMap<usize, Vec<Detection>>,
    truth: &BTreeMap<usize, Vec<G>>,
    iou_threshold: f64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let only_pred: Vec<usize> = predictions
        .keys()
        .filter(|k| !truth.contains_key(k))
        .copied()
        .collect();
    let only_truth: Vec<usize> = truth
        .keys()
        .filter(|k| !predictions.contains_key(k))
        .copied()
        .collect();
    if !only_pred.is_empty() || !only_truth.is_empty() {
        return Err(Error::Invalid(format!(
            "image ids differ: only in predictions {only_pred:?}, only in ground truth {only_truth:?}"
        )));
    }
    let mut blocks = Vec::new();
    for kind in [IouKind::Box, IouKind::Mask] {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut scored = Vec::new();
        for (&id, dets) in predictions {
            let m = match_instances(dets, &truth[&id], kind, iou_threshold)?;
            tp += m.tp();
            fp += m.fp();
            fn_ += m.fn_();
            let hits = m.is_tp(dets.len());
            for (rank, d) in
                confidence_order(&dets.iter().map(|d| d.confidence).collect::<Vec<_>>())
                    .into_iter()
                    .enumerate()
            {
                scored.push(Scored {
                    confidence: dets[d].confidence,
                    tp: hits[d],
                    key: (id, rank),
                });
            }
        }
        blocks.push(BlockReport::build(tp, fp, fn_, &scored));
    }

    let (mut px_tp, mut px_pred, mut px_truth) = (0, 0, 0);
    for (id, dets) in predictions {
        let pred = union_of(dets.iter().map(|d| &d.mask))?;
        let gt = union_of(truth[id].iter().map(|g| g.mask()))?;
        px_pred += pred.as_ref().map_or(0, Mask::count);
        px_truth += gt.as_ref().map_or(0, Mask::count);
        if let (Some(p), Some(g)) = (&pred, &gt) {
            px_tp += p.intersection_count(g)?;
        }
    }
    let mask = blocks.pop().expect("two blocks");
    let box_ = blocks.pop().expect("two blocks");
    Ok(EvalReport {
        box_,
        mask,
        pixel_precision: ratio(px_tp, px_pred).unwrap_or(0.0),
        pixel_recall: ratio(px_tp, px_truth).unwrap_or(0.0),
        config,
    })
}

#[cfg(test)]
mod tests;
