//! Gradient checks and timing runs on single blocks, shared by the command
//! line and the test suites.

use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{apply, AttentionBlock, AttentionConfig, AttentionKind, Extent};
use crate::error::{Error, Result};
use crate::model::{build_model, c2f_block, c2f_params, ModelConfig};
use crate::params::{Bound, ParamSet};
use crate::rng::{stream_id, Pcg32};
use crate::tensor::{grad_check_many, GradCheckReport, Shape, Tape, Tensor, Var};

/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-4;
/// Largest accepted relative gradient error for a single block.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Largest accepted relative gradient error through the whole model and loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Coord,
    Cbam,
    /// Global self-attention.
    Mhsa,
    /// Self-attention over a 3x3 window.
    MhsaLocal,
    Dual,
    C2f,
    Loss,
}

impl Probe {
    pub const ALL: [Probe; 7] = [
        Probe::Coord,
        Probe::Cbam,
        Probe::Mhsa,
        Probe::MhsaLocal,
        Probe::Dual,
        Probe::C2f,
        Probe::Loss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Probe::Coord => "coord",
            Probe::Cbam => "cbam",
            Probe::Mhsa => "mhsa",
            Probe::MhsaLocal => "mhsa-local",
            Probe::Dual => "dual",
            Probe::C2f => "c2f",
            Probe::Loss => "loss",
        }
    }

    fn attention(self, channels: usize) -> Option<AttentionConfig> {
        let kind = match self {
            Probe::Coord => AttentionKind::Coord,
            Probe::Cbam => AttentionKind::Cbam,
            Probe::Mhsa | Probe::MhsaLocal => AttentionKind::Mhsa,
            Probe::Dual => AttentionKind::Dual,
            Probe::C2f | Probe::Loss => return None,
        };
        let heads = [4, 2, 1]
            .into_iter()
            .find(|h| channels.is_multiple_of(*h))
            .unwrap_or(1);
        let cfg = AttentionConfig::new(kind, channels).with_heads(heads);
        Some(if self == Probe::MhsaLocal {
            cfg.with_extent(Extent::Local(3))
        } else {
            cfg
        })
    }
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown block `{s}`")))
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64, what: &str) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut Pcg32::new(seed, stream_id(what)))
}

/// A block under test: its parameters and how to apply it.
struct Subject {
    probe: Probe,
    cfg: Option<AttentionConfig>,
    params: ParamSet,
}

impl Subject {
    fn new(probe: Probe, shape: Shape, seed: u64) -> Result<Self> {
        let [_, c, h, w] = shape;
        let cfg = probe.attention(c);
        let params = match (&cfg, probe) {
            (Some(cfg), _) => AttentionBlock::new(cfg.clone(), (h, w), seed)?
                .params()
                .clone(),
            (None, Probe::C2f) => ParamSet::from_specs(&c2f_params("c2f", c, 2), seed)?,
            _ => ParamSet::new(),
        };
        Ok(Subject { probe, cfg, params })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, target: &Tensor) -> Result<Var> {
        let y = match (&self.cfg, self.probe) {
            (Some(cfg), _) => apply(tape, x, &bound.scope(""), cfg)?,
            (None, Probe::C2f) => c2f_block(tape, x, &bound.scope("c2f"), 2)?,
            _ => {
                let g = tape.constant(target.clone());
                return tape.seg_loss(x, g, 1.0, 1.0);
            }
        };
        let r = tape.constant(target.clone());
        let p = tape.mul(y, r)?;
        tape.sum(p)
    }

    /// Input and the fixed tensor that turns the block output into a scalar
    /// (random weights, or a binary target for the loss).
    fn data(&self, shape: Shape, seed: u64) -> (Tensor, Tensor) {
        if self.probe == Probe::Loss {
            let p = uniform(shape, 0.05, 0.95, seed, "probe/x");
            let g = uniform(shape, 0.0, 1.0, seed, "probe/r");
            let g = Tensor::new(
                shape,
                g.data().iter().map(|&v| (v < 0.5) as u8 as f64).collect(),
            )
            .expect("same shape");
            (p, g)
        } else {
            (
                uniform(shape, -1.0, 1.0, seed, "probe/x"),
                uniform(shape, -1.0, 1.0, seed, "probe/r"),
            )
        }
    }
}

/// Shape used by [`grad_error`].
pub fn probe_shape(probe: Probe) -> Shape {
    match probe {
        Probe::Loss => [2, 1, 4, 4],
        _ => [1, 4, 5, 5],
    }
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar made from the block's output, over the input and every parameter.
pub fn grad_error(probe: Probe, seed: u64) -> Result<f64> {
    let shape = probe_shape(probe);
    let subject = Subject::new(probe, shape, seed)?;
    let (x, target) = subject.data(shape, seed);
    let names: Vec<String> = subject.params.names().map(String::from).collect();
    let mut inputs = vec![x];
    inputs.extend(subject.params.iter().map(|(_, t)| t.clone()));
    let report = grad_check_many(
        |tape, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
            subject.forward(tape, &bound, vars[0], &target)
        },
        &inputs,
        GRAD_STEP,
    )?;
    Ok(report.max_rel_error)
}

/// Gradient check of `seg_loss(model(x), target)` with respect to four randomly
/// chosen parameter tensors of a small model; the others are held fixed.
pub fn end_to_end_grad_check(kind: AttentionKind, c2f: bool, seed: u64) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::new(kind, c2f)
        .with_widths(4, 2)
        .with_input_size(8, 8);
    cfg.attention.mhsa_heads = 2;
    let model = build_model(cfg, seed)?;
    let x = uniform([2, 3, 8, 8], 0.0, 1.0, seed, "probe/image");
    let bits = uniform([2, 1, 8, 8], 0.0, 1.0, seed, "probe/target");
    let target = Tensor::new(
        [2, 1, 8, 8],
        bits.data()
            .iter()
            .map(|&v| (v < 0.5) as u8 as f64)
            .collect(),
    )?;

    let all: Vec<&str> = model.params().names().collect();
    let mut rng = Pcg32::new(seed, stream_id("probe/pick"));
    let mut picked: Vec<&str> = Vec::new();
    while picked.len() < 4.min(all.len()) {
        let name = all[rng.below(all.len() as u32) as usize];
        if !picked.contains(&name) {
            picked.push(name);
        }
    }
    let inputs: Vec<Tensor> = picked
        .iter()
        .map(|n| model.params().get(n).cloned())
        .collect::<Result<_>>()?;
    grad_check_many(
        |tape, vars| {
            let mut pairs: Vec<(String, Var)> = picked
                .iter()
                .map(|s| s.to_string())
                .zip(vars.iter().copied())
                .collect();
            for (name, t) in model.params().iter() {
                if !picked.contains(&name) {
                    pairs.push((name.to_string(), tape.constant(t.clone())));
                }
            }
            let bound = Bound::from_pairs(pairs);
            let xv = tape.constant(x.clone());
            let prob = model.forward_bound(tape, &bound, xv)?;
            let g = tape.constant(target.clone());
            tape.seg_loss(prob, g, 1.0, 1.0)
        },
        &inputs,
        GRAD_STEP,
    )
}

/// Untimed iterations before measurement starts.
pub const BENCH_WARMUP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub iter: usize,
    pub forward_seconds: f64,
    pub forward_backward_seconds: f64,
}

/// Times `iters` forward passes and `iters` forward+backward passes of the
/// block on an input of `shape`, after [`BENCH_WARMUP`] untimed rounds.
pub fn bench(probe: Probe, shape: Shape, iters: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if iters == 0 {
        return Err(Error::Config("--iters must be at least 1".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Config(format!("shape {shape:?} has a zero extent")));
    }
    if probe == Probe::C2f && !shape[1].is_multiple_of(2) {
        return Err(Error::Config("c2f needs an even channel count".into()));
    }
    let subject = Subject::new(probe, shape, seed)?;
    if let Some(cfg) = &subject.cfg {
        cfg.validate()?;
    }
    let (x, target) = subject.data(shape, seed);
    let run = |backward: bool| -> Result<f64> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let bound = subject.params.bind_with(&mut tape, backward);
        let xv = if backward {
            tape.param(x.clone())
        } else {
            tape.constant(x.clone())
        };
        let out = subject.forward(&mut tape, &bound, xv, &target)?;
        if backward {
            tape.backward(out)?;
        }
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..BENCH_WARMUP {
        run(false)?;
        run(true)?;
    }
    (0..iters)
        .map(|iter| {
            Ok(BenchRow {
                iter,
                forward_seconds: run(false)?,
                forward_backward_seconds: run(true)?,
            })
        })
        .collect()
}

/// Nearest-rank percentile, `q` in `[0, 1]`; `None` for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

/// Middle value, mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}
