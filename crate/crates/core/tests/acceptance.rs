//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use attnseg::attention::{
    self_attention_weights, AttentionBlock, AttentionConfig, AttentionKind, Extent,
};
use attnseg::dataset::{generate_dataset, Dataset, GenConfig, Split};
use attnseg::diagnostics::{
    end_to_end_grad_check, grad_error, Probe, BLOCK_TOLERANCE, END_TO_END_TOLERANCE,
};
use attnseg::metrics::{evaluate, f_beta, BlockReport, EvalReport};
use attnseg::model::{build_model, ModelConfig};
use attnseg::pipeline::evaluate_model;
use attnseg::rng::Pcg32;
use attnseg::tensor::{Tape, Tensor};
use attnseg::trainer::{format_log, EpochLog, TrainConfig, Trainer};

/// Rows of the two reference result tables (box, then mask): name, precision, recall, F1, IoU.
const TABLE_1: [(&str, f64, f64, f64, f64); 10] = [
    ("YOLOv7", 0.695, 0.635, 0.66, 0.50),
    ("YOLOv8", 0.756, 0.656, 0.70, 0.54),
    ("Coord", 0.750, 0.672, 0.71, 0.55),
    ("Coord C2f", 0.622, 0.787, 0.69, 0.53),
    ("CBAM", 0.821, 0.721, 0.77, 0.62),
    ("CBAM C2f", 0.665, 0.717, 0.69, 0.53),
    ("SA", 0.832, 0.541, 0.66, 0.49),
    ("SA C2f", 0.693, 0.557, 0.62, 0.45),
    ("Dual", 0.795, 0.639, 0.71, 0.55),
    ("Dual C2f", 0.706, 0.721, 0.71, 0.56),
];

const TABLE_2: [(&str, f64, f64, f64, f64); 10] = [
    ("YOLOv7", 0.787, 0.609, 0.69, 0.52),
    ("YOLOv8", 0.686, 0.639, 0.66, 0.49),
    ("Coord", 0.737, 0.639, 0.68, 0.52),
    ("Coord C2f", 0.636, 0.773, 0.70, 0.53),
    ("CBAM", 0.787, 0.689, 0.73, 0.58),
    ("CBAM C2f", 0.679, 0.721, 0.70, 0.54),
    ("SA", 0.710, 0.459, 0.56, 0.39),
    ("SA C2f", 0.663, 0.475, 0.55, 0.38),
    ("Dual", 0.692, 0.541, 0.61, 0.43),
    ("Dual C2f", 0.773, 0.508, 0.61, 0.44),
];

const GRAD_SEEDS: u64 = 20;
const ORACLE_CASES: u64 = 1000;
const SOFTMAX_TOLERANCE: f64 = 1e-12;
const VALUE_PROJECTION_TOLERANCE: f64 = 1e-12;
const F1_THRESHOLD: f64 = 0.70;
const MATCH_IOU: f64 = 0.5;

type Outcome = Result<String, String>;

/// Files, checkpoints, logs and reports produced by a run, by name.
type Artifacts = BTreeMap<String, Vec<u8>>;

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn table_arithmetic() -> Outcome {
    let mut bad = Vec::new();
    for (table, rows) in [("table 1", &TABLE_1), ("table 2", &TABLE_2)] {
        for &(name, p, r, f1, iou) in rows {
            let f = f_beta(p, r, 1.0);
            let j = f / (2.0 - f);
            if round2(f) != f1 {
                bad.push(format!(
                    "{table} {name}: F1 {f:.4} -> {:.2}, table {f1:.2}",
                    round2(f)
                ));
            }
            if round2(j) != iou {
                bad.push(format!(
                    "{table} {name}: IoU {j:.4} -> {:.2}, table {iou:.2}",
                    round2(j)
                ));
            }
        }
    }
    if bad.is_empty() {
        Ok("20 rows, F1 and IoU columns reproduced at 2 dp".into())
    } else {
        Err(format!("{} mismatches: {}", bad.len(), bad.join("; ")))
    }
}

fn gradient_suite() -> Outcome {
    let mut worst_block = 0.0f64;
    for probe in Probe::ALL {
        for seed in 0..GRAD_SEEDS {
            let err = grad_error(probe, seed).map_err(|e| format!("{}: {e}", probe.as_str()))?;
            if err > BLOCK_TOLERANCE {
                return Err(format!(
                    "{} seed {seed}: max rel error {err:.3e} > {BLOCK_TOLERANCE:e}",
                    probe.as_str()
                ));
            }
            worst_block = worst_block.max(err);
        }
    }
    let (mut worst_e2e, mut checked, mut skipped) = (0.0f64, 0, 0);
    for kind in AttentionKind::ALL {
        for c2f in [false, true] {
            let r = end_to_end_grad_check(kind, c2f, 0).map_err(|e| e.to_string())?;
            if r.max_rel_error > END_TO_END_TOLERANCE {
                return Err(format!(
                    "{kind:?} c2f={c2f}: end-to-end error {:.3e} > {END_TO_END_TOLERANCE:e}",
                    r.max_rel_error
                ));
            }
            if r.elements == 0 {
                return Err(format!(
                    "{kind:?} c2f={c2f}: every element sits within h of a kink"
                ));
            }
            worst_e2e = worst_e2e.max(r.max_rel_error);
            checked += r.elements;
            skipped += r.skipped;
        }
    }
    Ok(format!(
        "{} blocks x {GRAD_SEEDS} seeds, worst {worst_block:.2e}; 10 end-to-end variants, worst {worst_e2e:.2e} \
         over {checked} elements ({skipped} within h of a ReLU/max-pool kink skipped)",
        Probe::ALL.len()
    ))
}

fn metric_oracle() -> Outcome {
    let mut matched = 0;
    for seed in 0..ORACLE_CASES {
        let case = common::random_case(seed);
        let report = evaluate(&case.preds, &case.truth, MATCH_IOU, serde_json::Value::Null)
            .map_err(|e| e.to_string())?;
        common::compare_matches(&case, MATCH_IOU).map_err(|e| format!("case {seed}: {e}"))?;
        common::compare_with_oracle(&case, &report, MATCH_IOU)
            .map_err(|e| format!("case {seed}: {e}"))?;
        matched += report.box_.tp + report.mask.tp;
    }
    Ok(format!(
        "{ORACLE_CASES} cases agree ({matched} matched pairs)"
    ))
}

fn run_block(block: &AttentionBlock, x: &Tensor) -> Result<Tensor, String> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, xv).map_err(|e| e.to_string())?;
    Ok(tape.value(y).clone())
}

fn attention_identities() -> Outcome {
    let x = Tensor::uniform([2, 8, 6, 5], -2.0, 2.0, &mut Pcg32::new(4, 4));
    for kind in [AttentionKind::Coord, AttentionKind::Cbam] {
        let mut block = AttentionBlock::new(AttentionConfig::new(kind, 8), (6, 5), 1)
            .map_err(|e| e.to_string())?;
        for (_, t) in block.params_mut().iter_mut() {
            t.data_mut().fill(0.0);
        }
        let y = run_block(&block, &x)?;
        if y.data().iter().zip(x.data()).any(|(a, b)| *a != 0.25 * b) {
            return Err(format!("zeroed {kind:?} block is not exactly 0.25 x"));
        }
    }

    let cfg = AttentionConfig::new(AttentionKind::Mhsa, 8)
        .with_heads(2)
        .with_extent(Extent::Local(1));
    let block = AttentionBlock::new(cfg, (6, 5), 2).map_err(|e| e.to_string())?;
    let y = run_block(&block, &x)?;
    let (vw, vb) = (
        block.params().get("mhsa.v.w").map_err(|e| e.to_string())?,
        block.params().get("mhsa.v.b").map_err(|e| e.to_string())?,
    );
    let mut worst = 0.0f64;
    for n in 0..2 {
        for o in 0..8 {
            for i in 0..6 {
                for j in 0..5 {
                    let v = vb.data()[o]
                        + (0..8)
                            .map(|c| vw.at(o, c, 0, 0) * x.at(n, c, i, j))
                            .sum::<f64>();
                    worst = worst.max((y.at(n, o, i, j) - v).abs());
                }
            }
        }
    }
    if worst > VALUE_PROJECTION_TOLERANCE {
        return Err(format!(
            "k=1 self-attention differs from the value projection by {worst:e}"
        ));
    }

    let mut worst_sum = 0.0f64;
    for extent in [Extent::Global, Extent::Local(3)] {
        let cfg = AttentionConfig::new(AttentionKind::Mhsa, 8)
            .with_heads(4)
            .with_extent(extent);
        let block = AttentionBlock::new(cfg.clone(), (6, 5), 3).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let bound = block.params().bind(&mut tape);
        let xv = tape.constant(x.clone());
        let w = self_attention_weights(&mut tape, xv, &bound.scope("mhsa"), &cfg)
            .map_err(|e| e.to_string())?;
        for row in tape.value(w).data().chunks(30) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst_sum > SOFTMAX_TOLERANCE {
        return Err(format!("softmax rows deviate from 1 by {worst_sum:e}"));
    }
    Ok(format!(
        "zeroed coord/CBAM give exactly 0.25x; k=1 matches value projection ({worst:.1e}); softmax rows within {worst_sum:.1e} of 1"
    ))
}

fn collect_files(root: &Path, dir: &Path, prefix: &str, out: &mut Artifacts) {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, prefix, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            out.insert(format!("{prefix}/{rel}"), std::fs::read(&p).unwrap());
        }
    }
}

/// The log without the wall-clock column.
fn loss_log(log: &[EpochLog]) -> Vec<u8> {
    format_log(log)
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string() + "\n")
        .collect::<String>()
        .into_bytes()
}

fn report_problems(r: &EvalReport) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |name: &str, v: f64| {
        if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
            out.push(format!("{name}={v}"));
        }
    };
    for (block, b) in [("box", &r.box_), ("mask", &r.mask)] {
        let BlockReport {
            precision,
            recall,
            f1,
            ap50,
            dataset_iou,
            ..
        } = b;
        for (n, v) in [
            ("precision", precision),
            ("recall", recall),
            ("f1", f1),
            ("ap50", ap50),
            ("iou", dataset_iou),
        ] {
            check(&format!("{block}.{n}"), *v);
        }
    }
    check("pixel_precision", r.pixel_precision);
    check("pixel_recall", r.pixel_recall);
    out
}

/// Generates a dataset, trains one model per variant and evaluates it. Returns
/// the reports and every produced byte.
fn train_and_evaluate(
    root: &Path,
    gen: &GenConfig,
    variants: &[ModelConfig],
    epochs: usize,
) -> Result<(Vec<EvalReport>, Artifacts), String> {
    let data = root.join("data");
    generate_dataset(gen, &data).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&data).map_err(|e| e.to_string())?;
    let train = ds.load_split(Split::Train).map_err(|e| e.to_string())?;
    let test = ds.load_split(Split::Test).map_err(|e| e.to_string())?;
    let mut artifacts = Artifacts::new();
    collect_files(&data, &data, "data", &mut artifacts);

    let mut reports = Vec::new();
    for model_cfg in variants {
        let name = model_cfg.variant_name();
        let ckpt = root.join(format!("{name}.ckpt"));
        let train_cfg = TrainConfig {
            epochs,
            batch_size: 4,
            seed: gen.seed,
            checkpoint: Some(ckpt.clone()),
            ..TrainConfig::default()
        };
        let model = build_model(model_cfg.clone(), gen.seed).map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(model, train_cfg.clone()).map_err(|e| e.to_string())?;
        let log = trainer
            .train(&train, |_| {})
            .map_err(|e| format!("{name}: {e}"))?;
        let config = serde_json::json!({ "data": gen, "model": model_cfg, "train": train_cfg });
        let report = evaluate_model(
            &trainer.model,
            &test,
            model_cfg.instance_threshold,
            MATCH_IOU,
            config,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        artifacts.insert(
            format!("{name}.ckpt"),
            std::fs::read(&ckpt).map_err(|e| e.to_string())?,
        );
        artifacts.insert(format!("{name}.log"), loss_log(&log));
        artifacts.insert(
            format!("{name}.json"),
            serde_json::to_vec_pretty(&report).unwrap(),
        );
        artifacts.insert(format!("{name}.csv"), report.to_csv(&name).into_bytes());
        reports.push(report);
    }
    Ok((reports, artifacts))
}

fn end_to_end_config() -> GenConfig {
    GenConfig {
        image_size: 64,
        count: 250,
        train_count: Some(200),
        seed: 1,
        ..GenConfig::default()
    }
}

fn smoke_config() -> GenConfig {
    GenConfig {
        image_size: 64,
        count: 20,
        seed: 1,
        ..GenConfig::default()
    }
}

fn all_variants() -> Vec<ModelConfig> {
    AttentionKind::ALL
        .into_iter()
        .flat_map(|k| [ModelConfig::new(k, false), ModelConfig::new(k, true)])
        .collect()
}

fn synthetic_end_to_end(root: &Path, out: &mut Artifacts) -> Outcome {
    let (reports, artifacts) =
        train_and_evaluate(root, &end_to_end_config(), &[ModelConfig::default()], 50)?;
    out.extend(artifacts);
    let r = &reports[0];
    let detail = format!(
        "box F1 {:.4} (P {:.3} R {:.3}), mask F1 {:.4} (P {:.3} R {:.3}), {} test instances",
        r.box_.f1,
        r.box_.precision,
        r.box_.recall,
        r.mask.f1,
        r.mask.precision,
        r.mask.recall,
        r.mask.tp + r.mask.fn_
    );
    if r.box_.f1 >= F1_THRESHOLD && r.mask.f1 >= F1_THRESHOLD {
        Ok(detail)
    } else {
        Err(format!("{detail}; both must be >= {F1_THRESHOLD}"))
    }
}

fn variant_matrix(root: &Path, out: &mut Artifacts) -> Outcome {
    let (reports, artifacts) = train_and_evaluate(root, &smoke_config(), &all_variants(), 2)?;
    out.extend(artifacts);
    let mut problems = Vec::new();
    for (cfg, r) in all_variants().iter().zip(&reports) {
        for p in report_problems(r) {
            problems.push(format!("{:?} c2f={}: {p}", cfg.attention.kind, cfg.use_c2f));
        }
    }
    if problems.is_empty() {
        Ok(format!(
            "{} variants trained 2 epochs, every report field finite and in [0,1]",
            reports.len()
        ))
    } else {
        Err(problems.join("; "))
    }
}

fn determinism(root: &Path, first: &Artifacts) -> Outcome {
    if first.is_empty() {
        return Err("criteria 5 and 6 produced nothing to compare".into());
    }
    let mut second = Artifacts::new();
    for (sub, f) in [
        (
            "end_to_end",
            synthetic_end_to_end as fn(&Path, &mut Artifacts) -> Outcome,
        ),
        ("smoke", variant_matrix),
    ] {
        let dir = root.join(sub);
        std::fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
        let mut part = Artifacts::new();
        // The repeat is judged on its bytes only.
        let _ = f(&dir, &mut part);
        second.extend(part.into_iter().map(|(k, v)| (format!("{sub}/{k}"), v)));
    }
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    if differing.is_empty() {
        Ok(format!(
            "{} artifacts byte-identical across repeated runs",
            first.len()
        ))
    } else {
        Err(format!("differing artifacts: {differing:?}"))
    }
}

struct Runner {
    failed: Vec<u32>,
}

impl Runner {
    fn run(&mut self, id: u32, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; took {elapsed:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed.push(id);
                ("FAIL", d)
            }
        };
        println!(
            "{status} criterion {id} [{title}] ({:.1}s): {detail}",
            elapsed.as_secs_f64()
        );
        std::io::stdout().flush().ok();
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut runner = Runner { failed: Vec::new() };
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));

    runner.run(
        1,
        "table arithmetic",
        Some(Duration::from_secs(1)),
        table_arithmetic,
    );
    runner.run(2, "gradient suite", minutes(2), gradient_suite);
    runner.run(3, "metric oracle", minutes(1), metric_oracle);
    runner.run(4, "attention identities", minutes(1), attention_identities);

    let mut first = Artifacts::new();
    let mut part = Artifacts::new();
    runner.run(5, "synthetic end-to-end", minutes(15), || {
        synthetic_end_to_end(&tmp.path().join("end_to_end"), &mut part)
    });
    first.extend(
        part.into_iter()
            .map(|(k, v)| (format!("end_to_end/{k}"), v)),
    );
    let mut part = Artifacts::new();
    runner.run(6, "variant matrix smoke", minutes(10), || {
        variant_matrix(&tmp.path().join("smoke"), &mut part)
    });
    first.extend(part.into_iter().map(|(k, v)| (format!("smoke/{k}"), v)));
    runner.run(7, "determinism", None, || determinism(tmp.path(), &first));

    runner.run(8, "non-claim", None, || {
        Ok("the ordering of variants on synthetic data is reported, not asserted".into())
    });

    if runner.failed.is_empty() {
        println!("acceptance: all 8 criteria pass");
    } else {
        println!("acceptance: failed criteria {:?}", runner.failed);
        std::process::exit(1);
    }
}
