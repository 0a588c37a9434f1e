//! Segmentation loss, optimizers, the training loop and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION, MAGIC};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::rng::{stream_id, Pcg32};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.01,
            OptimizerKind::Adam => 0.001,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd|adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// `None` uses the optimizer's default.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub w_bce: f64,
    pub w_dice: f64,
    /// Where checkpoints go; `None` disables them.
    pub checkpoint: Option<PathBuf>,
    /// Also checkpoint after every `k` epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            optimizer: OptimizerKind::Sgd,
            lr: None,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            w_bce: 1.0,
            w_dice: 1.0,
            checkpoint: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.optimizer.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr >= 0.0) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("momentum, beta1 and beta2 must lie in [0,1) and eps must be positive");
        }
        if !(self.w_bce >= 0.0 && self.w_dice >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// `w_bce * BCE + w_dice * (1 - Dice)` of a probability map against a 0/1
/// target, as a plain value (the differentiable version is [`Tape::seg_loss`]).
pub fn seg_loss(prob: &Tensor, target: &Tensor, w_bce: f64, w_dice: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(prob.clone());
    let g = tape.constant(target.clone());
    let l = tape.seg_loss(p, g, w_bce, w_dice)?;
    Ok(tape.value(l).data()[0])
}

/// Per-parameter optimizer slots: the velocity for SGD, first and second
/// moments for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub slots: BTreeMap<String, Vec<Tensor>>,
}

impl OptState {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let count = match kind {
            OptimizerKind::Sgd => 1,
            OptimizerKind::Adam => 2,
        };
        let slots = params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![Tensor::zeros(t.shape()); count]))
            .collect();
        OptState {
            kind,
            step: 0,
            slots,
        }
    }

    pub fn slot_names(kind: OptimizerKind) -> &'static [&'static str] {
        match kind {
            OptimizerKind::Sgd => &["velocity"],
            OptimizerKind::Adam => &["m", "v"],
        }
    }
}

/// One update of every parameter named in `grads`. Gradients are checked for
/// finiteness before anything is modified.
///
/// SGD: `v = momentum * v + g; p -= lr * v`. Adam: the bias-corrected update
/// with `beta1`, `beta2`, `eps` from `cfg`.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.kind != cfg.optimizer {
        return Err(Error::Config(format!(
            "optimizer state is {} but the config asks for {}",
            state.kind.as_str(),
            cfg.optimizer.as_str()
        )));
    }
    for (name, g) in grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
        let p = params.get(name)?;
        let slots = state
            .slots
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.shape() != g.shape() || slots.iter().any(|s| s.shape() != g.shape()) {
            return Err(Error::shape(
                "optimizer_step",
                format!("shape mismatch for {name}"),
            ));
        }
    }
    let lr = cfg.learning_rate();
    state.step += 1;
    let t = state.step as i32;
    for (name, g) in grads {
        let p = params.get_mut(name)?.data_mut();
        let slots = state.slots.get_mut(name).expect("checked above");
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                let v = slots[0].data_mut();
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                let (m, v) = slots.split_at_mut(1);
                let (m, v) = (m[0].data_mut(), v[0].data_mut());
                for (i, g) in g.data().iter().enumerate() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,mean_loss,seconds";

/// The log as CSV; losses use the shortest exact decimal form.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{},{},{:.3}", e.epoch, e.mean_loss, e.seconds);
    }
    s
}

/// Model, optimizer state, epoch counter and shuffle stream of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub opt: OptState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Pcg32,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptState::new(cfg.optimizer, model.params());
        let rng = Pcg32::new(cfg.seed, stream_id("shuffle"));
        Ok(Trainer {
            model,
            cfg,
            opt,
            epoch: 0,
            rng,
        })
    }

    /// Continues a run from a checkpoint; `cfg` may extend `epochs`.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt.optimizer.kind != cfg.optimizer {
            return Err(Error::Config(format!(
                "checkpoint was trained with {}, config asks for {}",
                ckpt.optimizer.kind.as_str(),
                cfg.optimizer.as_str()
            )));
        }
        Ok(Trainer {
            model: ckpt.model,
            cfg,
            opt: ckpt.optimizer,
            epoch: ckpt.epoch as usize,
            rng: Pcg32::from_raw(ckpt.rng.0, ckpt.rng.1),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(self.cfg.clone()),
            optimizer: self.opt.clone(),
            epoch: self.epoch as u64,
            rng: self.rng.raw(),
        }
    }

    /// One pass over `samples` in a freshly shuffled order.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let loss = self.step(samples, chunk).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            total += loss * chunk.len() as f64;
        }
        self.epoch = epoch;
        Ok(EpochLog {
            epoch,
            mean_loss: total / samples.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn step(&mut self, samples: &[Sample], chunk: &[usize]) -> Result<f64> {
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &samples[i].image).collect();
        let targets: Vec<Tensor> = chunk.iter().map(|&i| samples[i].target()).collect();
        let targets: Vec<&Tensor> = targets.iter().collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::stack(&images)?);
        let g = tape.constant(Tensor::stack(&targets)?);
        let (bound, prob) = self.model.forward(&mut tape, x)?;
        let loss = tape.seg_loss(prob, g, self.cfg.w_bce, self.cfg.w_dice)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let named: BTreeMap<String, Tensor> = bound
            .iter()
            .map(|(name, v)| {
                (
                    name.to_string(),
                    grads.take(v).expect("every parameter is a leaf"),
                )
            })
            .collect();
        optimizer_step(self.model.params_mut(), &named, &mut self.opt, &self.cfg)?;
        Ok(value)
    }

    /// Runs the remaining epochs up to `cfg.epochs`, writing checkpoints as
    /// configured. `on_epoch` sees every finished epoch.
    pub fn train(
        &mut self,
        samples: &[Sample],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut log = Vec::new();
        while self.epoch < self.cfg.epochs {
            let entry = self.run_epoch(samples)?;
            on_epoch(&entry);
            log.push(entry);
            let every = self.cfg.checkpoint_every;
            let periodic = every > 0 && self.epoch.is_multiple_of(every);
            if let Some(path) = &self.cfg.checkpoint {
                if periodic || self.epoch == self.cfg.epochs {
                    save_checkpoint(path, &self.checkpoint())?;
                }
            }
        }
        Ok(log)
    }
}

/// Trains `model` on `samples` from scratch.
pub fn train(
    model: Model,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let log = trainer.train(samples, |_| {})?;
    Ok((trainer.model, log))
}

#[cfg(test)]
mod tests;
