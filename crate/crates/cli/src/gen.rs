use std::path::PathBuf;

use attnseg::dataset::{generate_dataset, Difficulty, GenConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::settings::{echo, expect_command, load, required, set, Outcome};

#[derive(Args)]
pub struct GenArgs {
    /// JSON file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of images [default: 100].
    #[arg(long)]
    count: Option<usize>,
    /// Image side in pixels [default: 64].
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// easy | hard [default: easy].
    #[arg(long)]
    difficulty: Option<String>,
    /// Training split size [default: 79% of count].
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    min_blobs: Option<usize>,
    #[arg(long)]
    max_blobs: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenSettings {
    command: String,
    out: Option<PathBuf>,
    count: usize,
    size: usize,
    seed: u64,
    difficulty: Difficulty,
    train_count: Option<usize>,
    min_blobs: usize,
    max_blobs: usize,
}

impl Default for GenSettings {
    fn default() -> Self {
        let d = GenConfig::default();
        GenSettings {
            command: "gen".into(),
            out: None,
            count: d.count,
            size: d.image_size,
            seed: d.seed,
            difficulty: d.difficulty,
            train_count: d.train_count,
            min_blobs: d.min_blobs,
            max_blobs: d.max_blobs,
        }
    }
}

pub fn run(a: GenArgs) -> Outcome {
    let mut s: GenSettings = load(a.config.as_deref())?;
    expect_command(&s.command, "gen")?;
    set(&mut s.out, a.out.map(Some));
    set(&mut s.count, a.count);
    set(&mut s.size, a.size);
    set(&mut s.seed, a.seed);
    set(
        &mut s.difficulty,
        a.difficulty.as_deref().map(str::parse).transpose()?,
    );
    set(&mut s.train_count, a.train_count.map(Some));
    set(&mut s.min_blobs, a.min_blobs);
    set(&mut s.max_blobs, a.max_blobs);
    echo(&s);

    let out = required(&s.out, "--out")?;
    let cfg = GenConfig {
        image_size: s.size,
        count: s.count,
        seed: s.seed,
        difficulty: s.difficulty,
        min_blobs: s.min_blobs,
        max_blobs: s.max_blobs,
        train_count: s.train_count,
    };
    let manifest = generate_dataset(&cfg, &out)?;
    println!(
        "wrote {} images ({} train, {} test) to {}",
        cfg.count,
        manifest.train.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}
