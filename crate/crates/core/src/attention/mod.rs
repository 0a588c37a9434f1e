//! Attention blocks. Each maps `(N, C, H, W)` to `(N, C, H, W)`.
//!
//! * [`coord_attention`]: direction-wise pooled descriptors turned into row and
//!   column gates.
//! * [`cbam_block`]: channel gate ([`cbam_channel_gate`]) followed by a spatial
//!   gate ([`cbam_spatial_gate`]).
//! * [`self_attention_2d`]: multi-head dot-product attention over positions with
//!   split height/width position embeddings.
//! * [`dual_attention`]: `cbam_block` then `self_attention_2d`.

mod cbam;
mod coord;
mod mhsa;

pub use cbam::{cbam_block, cbam_channel_gate, cbam_params, cbam_spatial_gate};
pub use coord::{coord_attention, coord_params};
pub use mhsa::{
    mhsa_params, neighbourhood_mask, self_attention_2d, self_attention_reference,
    self_attention_weights,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamSpec, Scope};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Coord,
    Cbam,
    Mhsa,
    Dual,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::None,
        AttentionKind::Coord,
        AttentionKind::Cbam,
        AttentionKind::Mhsa,
        AttentionKind::Dual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Coord => "coord",
            AttentionKind::Cbam => "cbam",
            AttentionKind::Mhsa => "mhsa",
            AttentionKind::Dual => "dual",
        }
    }

    pub fn uses_self_attention(self) -> bool {
        matches!(self, AttentionKind::Mhsa | AttentionKind::Dual)
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention kind `{s}`")))
    }
}

/// Neighbourhood each output position attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extent {
    /// Every position of the feature map.
    Global,
    /// A centred `k x k` window (`k` odd).
    Local(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub channels: usize,
    pub coord_reduction: usize,
    pub cbam_reduction: usize,
    pub mhsa_heads: usize,
    pub mhsa_extent: Extent,
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, channels: usize) -> Self {
        AttentionConfig {
            kind,
            channels,
            coord_reduction: 8,
            cbam_reduction: default_cbam_reduction(channels),
            mhsa_heads: 4,
            mhsa_extent: Extent::Global,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.mhsa_heads = heads;
        self
    }

    pub fn with_extent(mut self, extent: Extent) -> Self {
        self.mhsa_extent = extent;
        self
    }

    /// Same structural settings for a different channel width; the CBAM reduction
    /// is re-derived from the new width.
    pub fn for_channels(&self, channels: usize) -> Self {
        AttentionConfig {
            channels,
            cbam_reduction: default_cbam_reduction(channels),
            ..self.clone()
        }
    }

    pub fn coord_hidden(&self) -> usize {
        (self.channels / self.coord_reduction.max(1)).max(1)
    }

    pub fn cbam_hidden(&self) -> usize {
        (self.channels / self.cbam_reduction.max(1)).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.mhsa_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("attention needs at least one channel".into()));
        }
        if self.coord_reduction == 0 || self.cbam_reduction == 0 {
            return Err(Error::Config("reduction ratios must be >= 1".into()));
        }
        if self.kind.uses_self_attention() {
            if self.mhsa_heads == 0 || !self.channels.is_multiple_of(self.mhsa_heads) {
                return Err(Error::Config(format!(
                    "{} channels are not divisible into {} heads",
                    self.channels, self.mhsa_heads
                )));
            }
            if let Extent::Local(k) = self.mhsa_extent {
                if k % 2 == 0 {
                    return Err(Error::Config(format!(
                        "local extent must be odd so the window is centred, got {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn default_cbam_reduction(channels: usize) -> usize {
    (channels / 2).clamp(1, 16)
}

/// A standalone attention block: configuration plus owned parameters.
///
/// Parameter names are `coord.*`, `cbam.*` and `mhsa.*` for the respective
/// sub-blocks; a dual block carries both `cbam.*` and `mhsa.*`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    cfg: AttentionConfig,
    spatial: (usize, usize),
    params: ParamSet,
}

impl AttentionBlock {
    /// `spatial` is the `(H, W)` of the feature maps the block will see; the
    /// self-attention position embeddings are sized from it.
    pub fn new(cfg: AttentionConfig, spatial: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        let specs = Self::specs(&cfg, spatial);
        let params = ParamSet::from_specs(&specs, seed)?;
        Ok(AttentionBlock {
            cfg,
            spatial,
            params,
        })
    }

    pub fn specs(cfg: &AttentionConfig, spatial: (usize, usize)) -> Vec<ParamSpec> {
        match cfg.kind {
            AttentionKind::None => vec![],
            AttentionKind::Coord => coord_params("coord", cfg),
            AttentionKind::Cbam => cbam_params("cbam", cfg),
            AttentionKind::Mhsa => mhsa_params("mhsa", cfg, spatial),
            AttentionKind::Dual => {
                let mut specs = cbam_params("cbam", cfg);
                specs.extend(mhsa_params("mhsa", cfg, spatial));
                specs
            }
        }
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.spatial
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Binds the parameters on `tape` and applies the block to `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.params.bind(tape);
        apply(tape, x, &bound.scope(""), &self.cfg)
    }
}

/// Applies the block selected by `cfg.kind` using parameters under `scope`.
pub fn apply(tape: &mut Tape, x: Var, scope: &Scope<'_>, cfg: &AttentionConfig) -> Result<Var> {
    match cfg.kind {
        AttentionKind::None => Ok(x),
        AttentionKind::Coord => coord_attention(tape, x, &scope.nest("coord"), cfg),
        AttentionKind::Cbam => cbam_block(tape, x, &scope.nest("cbam")),
        AttentionKind::Mhsa => self_attention_2d(tape, x, &scope.nest("mhsa"), cfg),
        AttentionKind::Dual => dual_attention(tape, x, scope, cfg),
    }
}

/// `self_attention_2d(cbam_block(x))`, with parameters under `cbam.*` and `mhsa.*`.
pub fn dual_attention(
    tape: &mut Tape,
    x: Var,
    scope: &Scope<'_>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let refined = cbam_block(tape, x, &scope.nest("cbam"))?;
    self_attention_2d(tape, refined, &scope.nest("mhsa"), cfg)
}

pub(crate) fn check_channels(
    tape: &Tape,
    x: Var,
    cfg: &AttentionConfig,
    op: &'static str,
) -> Result<()> {
    let c = tape.shape(x)[1];
    if c != cfg.channels {
        return Err(Error::Shape {
            op,
            msg: format!(
                "input has {c} channels, block configured for {}",
                cfg.channels
            ),
        });
    }
    Ok(())
}
