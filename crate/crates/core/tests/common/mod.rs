//! Brute-force reference implementations of the evaluation metrics, written
//! without the library's geometry or matching code, plus random test cases.

#![allow(dead_code)]

use std::collections::BTreeMap;

use attnseg::geom::{Detection, Mask};
use attnseg::metrics::EvalReport;
use attnseg::rng::Pcg32;

pub const SIDE: usize = 8;

/// Per-image detections and ground truth on an 8x8 grid.
#[derive(Debug, Clone)]
pub struct Case {
    pub preds: BTreeMap<usize, Vec<Detection>>,
    pub truth: BTreeMap<usize, Vec<Detection>>,
}

fn random_mask(rng: &mut Pcg32, ragged: bool) -> Mask {
    loop {
        let x0 = rng.below(SIDE as u32) as usize;
        let y0 = rng.below(SIDE as u32) as usize;
        let x1 = x0 + 1 + rng.below((SIDE - x0) as u32) as usize;
        let y1 = y0 + 1 + rng.below((SIDE - y0) as u32) as usize;
        let keep: Vec<bool> = (0..SIDE * SIDE)
            .map(|_| !ragged || rng.below(3) != 0)
            .collect();
        let m = Mask::from_fn(SIDE, SIDE, |x, y| {
            x >= x0 && x < x1 && y >= y0 && y < y1 && keep[y * SIDE + x]
        });
        if !m.is_empty() {
            return m;
        }
    }
}

/// 1-3 images, each with at most 4 detections and 3 ground-truth instances.
/// Confidences come from a coarse grid so ties are common.
pub fn random_case(seed: u64) -> Case {
    let mut rng = Pcg32::new(seed, attnseg::rng::stream_id("oracle"));
    let ragged = rng.below(2) == 1;
    let images = 1 + rng.below(3) as usize;
    let mut case = Case {
        preds: BTreeMap::new(),
        truth: BTreeMap::new(),
    };
    for id in 0..images {
        let n_det = rng.below(5) as usize;
        let n_gt = rng.below(4) as usize;
        let dets = (0..n_det)
            .map(|_| {
                let m = random_mask(&mut rng, ragged);
                let conf = (1 + rng.below(4)) as f64 / 4.0;
                Detection::from_mask(m, conf, id).unwrap()
            })
            .collect();
        let gts = (0..n_gt)
            .map(|_| Detection::from_mask(random_mask(&mut rng, ragged), 1.0, id).unwrap())
            .collect();
        case.preds.insert(id, dets);
        case.truth.insert(id, gts);
    }
    case
}

fn pixels(m: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Pixels of the tightest rectangle around the mask.
fn box_pixels(m: &Mask) -> Vec<(usize, usize)> {
    let p = pixels(m);
    let (x0, x1) = (
        p.iter().map(|q| q.0).min().unwrap(),
        p.iter().map(|q| q.0).max().unwrap(),
    );
    let (y0, y1) = (
        p.iter().map(|q| q.1).min().unwrap(),
        p.iter().map(|q| q.1).max().unwrap(),
    );
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            out.push((x, y));
        }
    }
    out
}

fn pixel_iou(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let inter = a.iter().filter(|p| b.contains(p)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

pub fn oracle_iou(a: &Detection, b: &Detection, boxes: bool) -> f64 {
    if boxes {
        pixel_iou(&box_pixels(&a.mask), &box_pixels(&b.mask))
    } else {
        pixel_iou(&pixels(&a.mask), &pixels(&b.mask))
    }
}

/// Greedy simulation: repeatedly take the unvisited detection with the highest
/// confidence (earliest on ties), give it the free truth with the highest IoU
/// (earliest on ties) when that IoU reaches the threshold. Returns, per
/// detection, the matched truth index, and the order detections were visited.
pub fn oracle_greedy(
    dets: &[Detection],
    gts: &[Detection],
    boxes: bool,
    thr: f64,
) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut visited = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut assigned = vec![None; dets.len()];
    let mut order = Vec::new();
    for _ in 0..dets.len() {
        let mut pick: Option<usize> = None;
        for (i, d) in dets.iter().enumerate() {
            if visited[i] {
                continue;
            }
            match pick {
                Some(p) if dets[p].confidence >= d.confidence => {}
                _ => pick = Some(i),
            }
        }
        let d = pick.unwrap();
        visited[d] = true;
        order.push(d);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = oracle_iou(&dets[d], gt, boxes);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= thr {
                taken[g] = true;
                assigned[d] = Some(g);
            }
        }
    }
    (assigned, order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleBlock {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub iou: f64,
}

/// Walks the ranked list once per prefix: AP is the sum, over true positives at
/// rank k, of 1/total times the best precision at any rank >= k.
pub fn oracle_ap(ranked_tp: &[bool], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let precision_at = |k: usize| {
        let hits = ranked_tp[..=k].iter().filter(|&&t| t).count();
        hits as f64 / (k + 1) as f64
    };
    let mut ap = 0.0;
    for k in 0..ranked_tp.len() {
        if ranked_tp[k] {
            let best = (k..ranked_tp.len()).map(precision_at).fold(0.0, f64::max);
            ap += best / total as f64;
        }
    }
    ap
}

pub fn oracle_block(case: &Case, boxes: bool, thr: f64) -> OracleBlock {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    // (confidence, image, rank within image, hit)
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (&id, dets) in &case.preds {
        let gts = &case.truth[&id];
        let (assigned, order) = oracle_greedy(dets, gts, boxes, thr);
        let hits = assigned.iter().filter(|a| a.is_some()).count();
        tp += hits;
        fp += dets.len() - hits;
        fn_ += gts.len() - hits;
        for (rank, &d) in order.iter().enumerate() {
            ranked.push((dets[d].confidence, id, rank, assigned[d].is_some()));
        }
    }
    // Selection by (confidence desc, image asc, rank asc).
    let mut list = Vec::new();
    while !ranked.is_empty() {
        let mut best = 0;
        for i in 1..ranked.len() {
            let (a, b) = (ranked[i], ranked[best]);
            if a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2)) {
                best = i;
            }
        }
        list.push(ranked.remove(best).3);
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    OracleBlock {
        tp,
        fp,
        fn_,
        precision: div(tp, tp + fp),
        recall: div(tp, tp + fn_),
        ap: oracle_ap(&list, tp + fn_),
        iou: div(tp, tp + fp + fn_),
    }
}

/// Largest tolerated difference for the floating-point fields; counts must be
/// equal.
pub const ORACLE_TOLERANCE: f64 = 1e-12;

/// Compares an evaluation report with the oracle, returning a description of
/// the first disagreement.
pub fn compare_with_oracle(case: &Case, report: &EvalReport, thr: f64) -> Result<(), String> {
    for (name, boxes, block) in [("box", true, &report.box_), ("mask", false, &report.mask)] {
        let o = oracle_block(case, boxes, thr);
        if (block.tp, block.fp, block.fn_) != (o.tp, o.fp, o.fn_) {
            return Err(format!(
                "{name} counts {:?} vs oracle {:?}",
                (block.tp, block.fp, block.fn_),
                (o.tp, o.fp, o.fn_)
            ));
        }
        for (field, got, want) in [
            ("precision", block.precision, o.precision),
            ("recall", block.recall, o.recall),
            ("ap50", block.ap50, o.ap),
            ("dataset_iou", block.dataset_iou, o.iou),
        ] {
            if (got - want).abs() > ORACLE_TOLERANCE {
                return Err(format!("{name} {field} {got} vs oracle {want}"));
            }
        }
    }
    Ok(())
}

/// Compares the library's per-image matching with the greedy simulation.
pub fn compare_matches(case: &Case, thr: f64) -> Result<(), String> {
    use attnseg::metrics::{match_instances, IouKind};
    for (&id, dets) in &case.preds {
        let gts = &case.truth[&id];
        for (boxes, kind) in [(true, IouKind::Box), (false, IouKind::Mask)] {
            let m = match_instances(dets, gts, kind, thr).map_err(|e| e.to_string())?;
            let (assigned, _) = oracle_greedy(dets, gts, boxes, thr);
            let mut got = vec![None; dets.len()];
            for &(d, g, iou) in &m.matches {
                got[d] = Some(g);
                if (iou - oracle_iou(&dets[d], &gts[g], boxes)).abs() > ORACLE_TOLERANCE {
                    return Err(format!("image {id} {kind:?}: IoU of ({d},{g}) {iou}"));
                }
            }
            if got != assigned {
                return Err(format!(
                    "image {id} {kind:?}: matches {got:?} vs oracle {assigned:?}"
                ));
            }
            let unmatched: Vec<usize> = (0..gts.len())
                .filter(|g| !assigned.contains(&Some(*g)))
                .collect();
            if m.unmatched_truths != unmatched {
                return Err(format!("image {id} {kind:?}: unmatched truths differ"));
            }
        }
    }
    Ok(())
}
