//! Glue between the model, the dataset and the metrics.

use std::collections::BTreeMap;

use crate::dataset::{InstanceAnnotation, Sample};
use crate::error::Result;
use crate::geom::Detection;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{extract_instances, Model};
use crate::tensor::Tensor;

/// Images per forward pass during inference.
const PREDICT_BATCH: usize = 8;

/// Runs the model over `samples` and extracts instances at threshold `tau`.
pub fn predict_instances(
    model: &Model,
    samples: &[Sample],
    tau: f64,
) -> Result<BTreeMap<usize, Vec<Detection>>> {
    let mut out = BTreeMap::new();
    for chunk in samples.chunks(PREDICT_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let prob = model.predict(&Tensor::stack(&images)?)?;
        for (i, s) in chunk.iter().enumerate() {
            out.insert(s.id, extract_instances(&prob.sample(i), tau, s.id)?);
        }
    }
    Ok(out)
}

pub fn ground_truth(samples: &[Sample]) -> BTreeMap<usize, Vec<InstanceAnnotation>> {
    samples
        .iter()
        .map(|s| (s.id, s.annotations.clone()))
        .collect()
}

/// Ground truth turned into detections with confidence 1, for self-tests of
/// the evaluation path.
pub fn truth_as_detections(samples: &[Sample]) -> Result<BTreeMap<usize, Vec<Detection>>> {
    samples
        .iter()
        .map(|s| {
            let dets = s
                .annotations
                .iter()
                .map(|a| Detection::from_mask(a.mask.clone(), 1.0, s.id))
                .collect::<Result<Vec<_>>>()?;
            Ok((s.id, dets))
        })
        .collect()
}

/// Predicts on `samples` and evaluates against their annotations.
pub fn evaluate_model(
    model: &Model,
    samples: &[Sample],
    tau: f64,
    iou_threshold: f64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let preds = predict_instances(model, samples, tau)?;
    evaluate(&preds, &ground_truth(samples), iou_threshold, config)
}
