//! Little-endian binary checkpoints.
//!
//! ```text
//! magic "ATSK" | u32 version | u32 entry count
//! entry: u32 name length | name bytes | u8 dtype | u32 rank | rank x u64 extents | payload
//! ```
//! dtype 0 is f64, 1 is u64 (both 8 bytes per element), 2 is raw bytes.
//!
//! Entries, in this order: `config/model` and optionally `config/train` (JSON
//! bytes), `epoch` (u64), `rng` (u64 x2: PCG32 state and increment),
//! `optim/kind` (bytes), `optim/step` (u64), `param/<name>` (f64, rank 4) for
//! every parameter, then `optim/<slot>/<name>` for every optimizer slot.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::{OptState, OptimizerKind, TrainConfig};

pub const MAGIC: &[u8; 4] = b"ATSK";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U64: u8 = 1;
const DTYPE_BYTES: u8 = 2;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub optimizer: OptState,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: (u64, u64),
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F64(Vec<usize>, Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Corrupt(msg.into()))
}

struct Writer(Vec<u8>, u32);

impl Writer {
    fn entry(&mut self, name: &str, payload: &Payload) {
        let out = &mut self.0;
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        let (tag, extents): (u8, Vec<u64>) = match payload {
            Payload::F64(shape, _) => (DTYPE_F64, shape.iter().map(|&e| e as u64).collect()),
            Payload::U64(v) => (DTYPE_U64, vec![v.len() as u64]),
            Payload::Bytes(b) => (DTYPE_BYTES, vec![b.len() as u64]),
        };
        out.push(tag);
        out.extend((extents.len() as u32).to_le_bytes());
        for e in extents {
            out.extend(e.to_le_bytes());
        }
        match payload {
            Payload::F64(_, data) => data.iter().for_each(|v| out.extend(v.to_le_bytes())),
            Payload::U64(data) => data.iter().for_each(|v| out.extend(v.to_le_bytes())),
            Payload::Bytes(b) => out.extend(b),
        }
        self.1 += 1;
    }
}

fn tensor_payload(t: &Tensor) -> Payload {
    Payload::F64(t.shape().to_vec(), t.data().to_vec())
}

/// Serialises a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new(), 0);
    w.entry("config/model", &json(ckpt.model.config()));
    if let Some(train) = &ckpt.train {
        w.entry("config/train", &json(train));
    }
    w.entry("epoch", &Payload::U64(vec![ckpt.epoch]));
    w.entry("rng", &Payload::U64(vec![ckpt.rng.0, ckpt.rng.1]));
    w.entry(
        "optim/kind",
        &Payload::Bytes(ckpt.optimizer.kind.as_str().as_bytes().to_vec()),
    );
    w.entry("optim/step", &Payload::U64(vec![ckpt.optimizer.step]));
    for (name, t) in ckpt.model.params().iter() {
        w.entry(&format!("param/{name}"), &tensor_payload(t));
    }
    let slot_names = OptState::slot_names(ckpt.optimizer.kind);
    for (i, slot) in slot_names.iter().enumerate() {
        for (name, tensors) in &ckpt.optimizer.slots {
            w.entry(
                &format!("optim/{slot}/{name}"),
                &tensor_payload(&tensors[i]),
            );
        }
    }
    let mut out = Vec::with_capacity(w.0.len() + 12);
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(w.1.to_le_bytes());
    out.extend(w.0);
    out
}

fn json(value: &impl serde::Serialize) -> Payload {
    Payload::Bytes(serde_json::to_vec(value).expect("configs serialise"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::Checkpoint(CheckpointError::Truncated))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn entry(&mut self) -> Result<(String, Payload)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| corrupt("entry name is not UTF-8"))?;
        let tag = self.take(1)?[0];
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("entry {name} has rank {rank}")));
        }
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(usize::try_from(self.u64()?).map_err(|_| corrupt("extent overflows"))?);
        }
        let count = extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| corrupt(format!("entry {name} is too large")))?;
        let width = if tag == DTYPE_BYTES { 1 } else { 8 };
        let bytes = count
            .checked_mul(width)
            .ok_or_else(|| corrupt("entry size overflows"))?;
        if bytes > self.remaining() {
            return Err(Error::Checkpoint(CheckpointError::Truncated));
        }
        let raw = self.take(bytes)?;
        let words = || raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
        let payload = match tag {
            DTYPE_F64 => Payload::F64(extents, words().map(f64::from_le_bytes).collect()),
            DTYPE_U64 if rank == 1 => Payload::U64(words().map(u64::from_le_bytes).collect()),
            DTYPE_BYTES if rank == 1 => Payload::Bytes(raw.to_vec()),
            _ => {
                return Err(corrupt(format!(
                    "entry {name} has dtype {tag} with rank {rank}"
                )))
            }
        };
        Ok((name, payload))
    }
}

/// Parses checkpoint bytes. Nothing is returned unless the whole file is
/// consistent.
pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < 4 {
        return Err(Error::Checkpoint(CheckpointError::Truncated));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Checkpoint(CheckpointError::BadMagic));
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }));
    }
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let (name, payload) = r.entry()?;
        if entries.insert(name.clone(), payload).is_some() {
            return Err(corrupt(format!("duplicate entry {name}")));
        }
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }

    let mut take = |name: &str| {
        entries
            .remove(name)
            .ok_or_else(|| corrupt(format!("missing entry {name}")))
    };
    let bytes = |p: Payload, name: &str| match p {
        Payload::Bytes(b) => Ok(b),
        _ => Err(corrupt(format!("{name} should be bytes"))),
    };
    let words = |p: Payload, name: &str, n: usize| match p {
        Payload::U64(v) if v.len() == n => Ok(v),
        _ => Err(corrupt(format!("{name} should hold {n} u64 values"))),
    };
    let model_cfg: ModelConfig =
        serde_json::from_slice(&bytes(take("config/model")?, "config/model")?)
            .map_err(|e| corrupt(format!("config/model: {e}")))?;
    let train = match take("config/train") {
        Ok(p) => Some(
            serde_json::from_slice::<TrainConfig>(&bytes(p, "config/train")?)
                .map_err(|e| corrupt(format!("config/train: {e}")))?,
        ),
        Err(_) => None,
    };
    let epoch = words(take("epoch")?, "epoch", 1)?[0];
    let rng = words(take("rng")?, "rng", 2)?;
    let kind: OptimizerKind = String::from_utf8(bytes(take("optim/kind")?, "optim/kind")?)
        .map_err(|_| corrupt("optim/kind is not UTF-8"))?
        .parse()
        .map_err(|_| corrupt("unknown optimizer kind"))?;
    let step = words(take("optim/step")?, "optim/step", 1)?[0];

    let to_tensor = |name: &str, p: Payload| -> Result<Tensor> {
        match p {
            Payload::F64(shape, data) if shape.len() == 4 => {
                Tensor::new([shape[0], shape[1], shape[2], shape[3]], data)
                    .map_err(|e| corrupt(format!("{name}: {e}")))
            }
            _ => Err(corrupt(format!("{name} should be a rank-4 f64 tensor"))),
        }
    };
    let mut params = ParamSet::new();
    let param_names: Vec<String> = entries
        .keys()
        .filter(|k| k.starts_with("param/"))
        .cloned()
        .collect();
    for key in param_names {
        let p = entries.remove(&key).expect("listed");
        params.insert(&key["param/".len()..], to_tensor(&key, p)?)?;
    }
    let model = Model::new(model_cfg, params)?;

    let mut slots: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for slot in OptState::slot_names(kind) {
        for (name, t) in model.params().iter() {
            let key = format!("optim/{slot}/{name}");
            let p = entries
                .remove(&key)
                .ok_or_else(|| corrupt(format!("missing entry {key}")))?;
            let value = to_tensor(&key, p)?;
            if value.shape() != t.shape() {
                return Err(Error::Checkpoint(CheckpointError::ShapeMismatch(key)));
            }
            slots.entry(name.to_string()).or_default().push(value);
        }
    }
    if let Some(extra) = entries.keys().next() {
        return Err(corrupt(format!("unexpected entry {extra}")));
    }
    Ok(Checkpoint {
        model,
        train,
        optimizer: OptState { kind, step, slots },
        epoch,
        rng: (rng[0], rng[1]),
    })
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, encode(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
