use std::path::PathBuf;

use attnseg::attention::AttentionKind;
use attnseg::dataset::{Dataset, Split};
use attnseg::model::{build_model, ModelConfig};
use attnseg::trainer::{format_log, OptimizerKind, TrainConfig, Trainer};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::settings::{echo, expect_command, load, required, set, write_file, Failure, Outcome};

#[derive(Args)]
pub struct TrainArgs {
    /// JSON file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// none | coord | cbam | mhsa | dual [default: none].
    #[arg(long)]
    attention: Option<String>,
    /// Use C2f blocks in the backbone stages.
    #[arg(long)]
    c2f: bool,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    batch: Option<usize>,
    /// Seeds parameter initialisation and shuffling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// sgd | adam [default: sgd].
    #[arg(long)]
    optimizer: Option<String>,
    /// [default: 0.01 for sgd, 0.001 for adam]
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV [default: checkpoint path with extension log.csv].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the checkpoint every this many epochs as well as at the end.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Channels of the first stage [default: 16].
    #[arg(long)]
    base_width: Option<usize>,
    /// Number of stride-2 stages [default: 3].
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    command: String,
    data: Option<PathBuf>,
    attention: AttentionKind,
    c2f: bool,
    epochs: usize,
    batch: usize,
    seed: u64,
    optimizer: OptimizerKind,
    lr: Option<f64>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    checkpoint_every: usize,
    base_width: usize,
    depth: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        TrainSettings {
            command: "train".into(),
            data: None,
            attention: m.attention.kind,
            c2f: m.use_c2f,
            epochs: t.epochs,
            batch: t.batch_size,
            seed: t.seed,
            optimizer: t.optimizer,
            lr: t.lr,
            out: None,
            log: None,
            checkpoint_every: t.checkpoint_every,
            base_width: m.base_width,
            depth: m.depth,
        }
    }
}

pub fn run(a: TrainArgs) -> Outcome {
    let mut s: TrainSettings = load(a.config.as_deref())?;
    expect_command(&s.command, "train")?;
    set(&mut s.data, a.data.map(Some));
    set(
        &mut s.attention,
        a.attention.as_deref().map(str::parse).transpose()?,
    );
    s.c2f |= a.c2f;
    set(&mut s.epochs, a.epochs);
    set(&mut s.batch, a.batch);
    set(&mut s.seed, a.seed);
    set(
        &mut s.optimizer,
        a.optimizer.as_deref().map(str::parse).transpose()?,
    );
    set(&mut s.lr, a.lr.map(Some));
    set(&mut s.out, a.out.map(Some));
    set(&mut s.log, a.log.map(Some));
    set(&mut s.checkpoint_every, a.checkpoint_every);
    set(&mut s.base_width, a.base_width);
    set(&mut s.depth, a.depth);
    let data = required(&s.data, "--data")?;
    let out = required(&s.out, "--out")?;
    let log_path = s
        .log
        .clone()
        .unwrap_or_else(|| out.with_extension("log.csv"));
    s.log = Some(log_path.clone());
    echo(&s);

    let ds = Dataset::open(&data)?;
    let size = ds.manifest().size;
    let model_cfg = ModelConfig::new(s.attention, s.c2f)
        .with_widths(s.base_width, s.depth)
        .with_input_size(size, size);
    let train_cfg = TrainConfig {
        epochs: s.epochs,
        batch_size: s.batch,
        optimizer: s.optimizer,
        lr: s.lr,
        seed: s.seed,
        checkpoint: Some(out.clone()),
        checkpoint_every: s.checkpoint_every,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let samples = ds.load_split(Split::Train)?;
    if samples.is_empty() {
        return Err(Failure::Usage(format!(
            "{} has an empty training split",
            data.display()
        )));
    }
    println!(
        "training {} on {} images of {size}x{size} for {} epochs",
        model_cfg.variant_name(),
        samples.len(),
        s.epochs
    );
    let mut trainer = Trainer::new(build_model(model_cfg, s.seed)?, train_cfg)?;
    let log = trainer.train(&samples, |e| {
        println!(
            "epoch {} mean_loss {} seconds {:.3}",
            e.epoch, e.mean_loss, e.seconds
        );
    })?;
    write_file(&log_path, format_log(&log).as_bytes())?;
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}
