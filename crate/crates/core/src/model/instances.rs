use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::geom::{Detection, Mask};
use crate::tensor::Tensor;

/// Connected components (4-neighbourhood) of `prob >= tau` in a `(1,1,H,W)`
/// map. Each component becomes a detection with its tight box and the mean
/// probability of its pixels as confidence; the list is sorted by confidence,
/// highest first, ties in raster order of the components' first pixels.
pub fn extract_instances(prob: &Tensor, tau: f64, image_id: usize) -> Result<Vec<Detection>> {
    let [n, c, h, w] = prob.shape();
    if n != 1 || c != 1 {
        return Err(Error::shape(
            "extract_instances",
            format!("expected a (1,1,H,W) map, got {:?}", prob.shape()),
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0,1), got {tau}"
        )));
    }
    let data = prob.data();
    let on: Vec<bool> = data.iter().map(|&p| p >= tau).collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        let mut mask = Mask::new(w, h);
        let mut total = 0.0;
        let mut count = 0usize;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            mask.set(x, y, true);
            total += data[i];
            count += 1;
            let mut visit = |j: usize| {
                if on[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(Detection::from_mask(mask, total / count as f64, image_id)?);
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(out)
}
