use std::path::PathBuf;

use attnseg::dataset::{Dataset, Split};
use attnseg::metrics::evaluate;
use attnseg::pipeline::{ground_truth, predict_instances, truth_as_detections};
use attnseg::trainer::load_checkpoint;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::settings::{echo, expect_command, load, required, set, write_file, Failure, Outcome};

#[derive(Args)]
pub struct EvalArgs {
    /// JSON file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: Option<PathBuf>,
    /// IoU needed for a match [default: 0.5].
    #[arg(long)]
    iou: Option<f64>,
    /// Probability threshold for instance extraction [default: the model's].
    #[arg(long)]
    tau: Option<f64>,
    /// test | train [default: test].
    #[arg(long)]
    split: Option<String>,
    /// Report JSON output path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Table-row CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Model column of the CSV [default: the variant name].
    #[arg(long)]
    name: Option<String>,
    /// Score the ground truth against itself; every metric must be 1.
    #[arg(long)]
    self_test: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    command: String,
    data: Option<PathBuf>,
    model: Option<PathBuf>,
    iou: f64,
    tau: Option<f64>,
    split: String,
    report: Option<PathBuf>,
    csv: Option<PathBuf>,
    name: Option<String>,
    self_test: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            command: "eval".into(),
            data: None,
            model: None,
            iou: 0.5,
            tau: None,
            split: "test".into(),
            report: None,
            csv: None,
            name: None,
            self_test: false,
        }
    }
}

pub fn run(a: EvalArgs) -> Outcome {
    let mut s: EvalSettings = load(a.config.as_deref())?;
    expect_command(&s.command, "eval")?;
    set(&mut s.data, a.data.map(Some));
    set(&mut s.model, a.model.map(Some));
    set(&mut s.iou, a.iou);
    set(&mut s.tau, a.tau.map(Some));
    set(&mut s.split, a.split);
    set(&mut s.report, a.report.map(Some));
    set(&mut s.csv, a.csv.map(Some));
    set(&mut s.name, a.name.map(Some));
    s.self_test |= a.self_test;
    echo(&s);

    let data = required(&s.data, "--data")?;
    let split = match s.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => {
            return Err(Failure::Usage(format!(
                "unknown split `{other}` (test|train)"
            )))
        }
    };
    if !(s.iou > 0.0 && s.iou <= 1.0) {
        return Err(Failure::Usage(format!(
            "--iou must lie in (0,1], got {}",
            s.iou
        )));
    }
    let ds = Dataset::open(&data)?;
    let samples = ds.load_split(split)?;

    let (predictions, model_cfg) = if s.self_test {
        (truth_as_detections(&samples)?, None)
    } else {
        let path = s.model.clone().ok_or_else(|| {
            Failure::Usage("--model is required unless --self-test is given".into())
        })?;
        let model = load_checkpoint(&path)?.model;
        let tau = s.tau.unwrap_or(model.config().instance_threshold);
        (
            predict_instances(&model, &samples, tau)?,
            Some(model.config().clone()),
        )
    };
    let name = s.name.clone().unwrap_or_else(|| match &model_cfg {
        Some(cfg) => cfg.variant_name(),
        None => "ground_truth".into(),
    });
    let config = serde_json::json!({ "eval": &s, "model": model_cfg });
    let report = evaluate(&predictions, &ground_truth(&samples), s.iou, config)?;

    println!("images {}", samples.len());
    print!("{}", report.to_csv(&name));
    println!(
        "pixel_precision {:.6} pixel_recall {:.6}",
        report.pixel_precision, report.pixel_recall
    );
    for (block, b) in [("box", &report.box_), ("mask", &report.mask)] {
        if !b.undefined.is_empty() {
            println!(
                "{block}: undefined (reported as 0): {}",
                b.undefined.join(", ")
            );
        }
    }
    if let Some(path) = &s.report {
        let mut json = serde_json::to_vec_pretty(&report).expect("report serialises");
        json.push(b'\n');
        write_file(path, &json)?;
    }
    if let Some(path) = &s.csv {
        write_file(path, report.to_csv(&name).as_bytes())?;
    }
    if s.self_test {
        let perfect = [&report.box_, &report.mask]
            .iter()
            .all(|b| b.fp == 0 && b.fn_ == 0 && b.table_row().iter().all(|&v| v == 1.0));
        let truths = report.mask.tp + report.mask.fn_;
        if truths > 0 && !perfect {
            return Err(Failure::Check(
                "self-test: ground truth does not score 1 against itself".into(),
            ));
        }
        println!("self-test passed on {truths} instances");
    }
    Ok(())
}
