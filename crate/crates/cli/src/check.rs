use std::fmt::Write as _;
use std::path::PathBuf;

use attnseg::diagnostics::{
    bench as time_block, grad_error, median, percentile, BenchRow, Probe, BLOCK_TOLERANCE,
};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::settings::{echo, expect_command, load, set, write_file, Failure, Outcome};

fn probes(names: &[String]) -> Result<Vec<Probe>, Failure> {
    names
        .iter()
        .map(|n| n.parse::<Probe>().map_err(Failure::from))
        .collect()
}

fn all_names() -> Vec<String> {
    Probe::ALL.iter().map(|p| p.as_str().to_string()).collect()
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// JSON file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// coord | cbam | mhsa | mhsa-local | dual | c2f | loss, comma separated [default: all].
    #[arg(long, value_delimiter = ',')]
    block: Option<Vec<String>>,
    /// Seeds per block [default: 20].
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckSettings {
    command: String,
    block: Vec<String>,
    seeds: u64,
    tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            command: "gradcheck".into(),
            block: all_names(),
            seeds: 20,
            tolerance: BLOCK_TOLERANCE,
        }
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut s: GradcheckSettings = load(a.config.as_deref())?;
    expect_command(&s.command, "gradcheck")?;
    set(&mut s.block, a.block);
    set(&mut s.seeds, a.seeds);
    echo(&s);

    let blocks = probes(&s.block)?;
    if s.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    if !(s.tolerance > 0.0) {
        return Err(Failure::Usage(format!(
            "tolerance must be > 0, got {}",
            s.tolerance
        )));
    }
    println!("block,seed,max_rel_error");
    let mut failures = Vec::new();
    for probe in blocks {
        let mut worst = 0.0f64;
        for seed in 0..s.seeds {
            let err = grad_error(probe, seed)?;
            println!("{},{seed},{err:.3e}", probe.as_str());
            worst = worst.max(err);
        }
        let verdict = if worst <= s.tolerance { "ok" } else { "FAIL" };
        println!(
            "# {} max {worst:.3e} (tolerance {:e}) {verdict}",
            probe.as_str(),
            s.tolerance
        );
        if worst > s.tolerance {
            failures.push(probe.as_str());
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {}",
            failures.join(", ")
        )))
    }
}

#[derive(Args)]
pub struct BenchArgs {
    /// JSON file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Blocks to time, comma separated; relative cost is against the first [default: cbam,coord].
    #[arg(long, value_delimiter = ',')]
    block: Option<Vec<String>>,
    /// Input shape N,C,H,W [default: 1,128,8,8].
    #[arg(long)]
    shape: Option<String>,
    /// Timed iterations after 3 warm-up rounds [default: 20].
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-iteration CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchSettings {
    command: String,
    block: Vec<String>,
    shape: [usize; 4],
    iters: usize,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            command: "bench".into(),
            block: vec!["cbam".into(), "coord".into()],
            shape: [1, 128, 8, 8],
            iters: 20,
            seed: 0,
            out: None,
        }
    }
}

fn parse_shape(s: &str) -> Result<[usize; 4], Failure> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("--shape `{s}`: {e}")))?;
    dims.try_into()
        .map_err(|_| Failure::Usage(format!("--shape `{s}` needs four values N,C,H,W")))
}

pub fn bench(a: BenchArgs) -> Outcome {
    let mut s: BenchSettings = load(a.config.as_deref())?;
    expect_command(&s.command, "bench")?;
    set(&mut s.block, a.block);
    set(
        &mut s.shape,
        a.shape.as_deref().map(parse_shape).transpose()?,
    );
    set(&mut s.iters, a.iters);
    set(&mut s.seed, a.seed);
    set(&mut s.out, a.out.map(Some));
    echo(&s);

    let blocks = probes(&s.block)?;
    if blocks.is_empty() {
        return Err(Failure::Usage("--block needs at least one block".into()));
    }
    let mut csv = String::from("block,iter,forward_seconds,forward_backward_seconds\n");
    let mut summary = String::from("block,median_forward,p90_forward,median_forward_backward,p90_forward_backward,relative_forward_backward\n");
    let mut baseline = None;
    for probe in blocks {
        let rows: Vec<BenchRow> = time_block(probe, s.shape, s.iters, s.seed)?;
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{:.9},{:.9}",
                probe.as_str(),
                r.iter,
                r.forward_seconds,
                r.forward_backward_seconds
            );
        }
        let fwd: Vec<f64> = rows.iter().map(|r| r.forward_seconds).collect();
        let both: Vec<f64> = rows.iter().map(|r| r.forward_backward_seconds).collect();
        let med = median(&both).unwrap_or(0.0);
        let base = *baseline.get_or_insert(med);
        let _ = writeln!(
            summary,
            "{},{:.9},{:.9},{:.9},{:.9},{:.3}",
            probe.as_str(),
            median(&fwd).unwrap_or(0.0),
            percentile(&fwd, 0.9).unwrap_or(0.0),
            med,
            percentile(&both, 0.9).unwrap_or(0.0),
            if base > 0.0 { med / base } else { 1.0 }
        );
    }
    match &s.out {
        Some(path) => {
            write_file(path, csv.as_bytes())?;
            print!("{summary}");
        }
        None => {
            print!("{csv}");
            eprint!("{summary}");
        }
    }
    Ok(())
}
