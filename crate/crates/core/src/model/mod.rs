//! Toy single-class segmentation network.
//!
//! ```text
//! stem 3x3 conv+ReLU (in -> B)
//! stage s = 1..=D: stride-2 3x3 conv+ReLU (B*2^(s-1) -> B*2^s), then either two
//!                  3x3 conv+ReLU or a C2f block
//! point A:         CBAM                      (params `backbone.cbam.*`)
//! point B:         coord | CBAM then MHSA xM  (params `neck.*`)
//! head step j = 1..=D: nearest x2 upsample, 3x3 conv+ReLU, width halving
//! 1x1 conv to one logit map, sigmoid
//! ```
//!
//! With no attention and no C2f the parameter count is [`plain_param_count`].

mod c2f;
mod instances;

pub use c2f::{c2f_block, c2f_params};
pub use instances::extract_instances;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, AttentionKind};
use crate::error::{CheckpointError, Error, Result};
use crate::params::{join, Bound, ParamSet, ParamSpec};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    /// Attention settings; `channels` must equal [`ModelConfig::bottleneck_channels`].
    pub attention: AttentionConfig,
    pub use_c2f: bool,
    pub c2f_bottlenecks: usize,
    pub instance_threshold: f64,
    /// `(H, W)` of the inputs; self-attention position embeddings are sized from it.
    pub input_size: (usize, usize),
    /// Self-attention blocks stacked at point B for `mhsa` and `dual`.
    pub mhsa_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(AttentionKind::None, false)
    }
}

impl ModelConfig {
    pub fn new(kind: AttentionKind, use_c2f: bool) -> Self {
        let mut cfg = ModelConfig {
            in_channels: 3,
            base_width: 16,
            depth: 3,
            attention: AttentionConfig::new(kind, 1),
            use_c2f,
            c2f_bottlenecks: 2,
            instance_threshold: 0.5,
            input_size: (64, 64),
            mhsa_blocks: 1,
        };
        cfg.attention = cfg.attention.for_channels(cfg.bottleneck_channels());
        cfg
    }

    /// Changes the widths and keeps the attention channel count in step.
    pub fn with_widths(mut self, base_width: usize, depth: usize) -> Self {
        self.base_width = base_width;
        self.depth = depth;
        self.attention = self.attention.for_channels(self.bottleneck_channels());
        self
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    /// `cbam`, `cbam_c2f`, ...
    pub fn variant_name(&self) -> String {
        let suffix = if self.use_c2f { "_c2f" } else { "" };
        format!("{}{suffix}", self.attention.kind.as_str())
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_width(self.depth)
    }

    /// Spatial size at the attention insertion points.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        (
            self.input_size.0 >> self.depth,
            self.input_size.1 >> self.depth,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.base_width == 0 {
            return bad("in_channels and base_width must be >= 1".into());
        }
        if self.depth > 16 {
            return bad(format!("depth {} is too large", self.depth));
        }
        if !(self.instance_threshold > 0.0 && self.instance_threshold < 1.0) {
            return bad(format!(
                "instance_threshold must lie in (0,1), got {}",
                self.instance_threshold
            ));
        }
        let step = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return bad(format!(
                "input size {h}x{w} is not divisible by 2^depth = {step}"
            ));
        }
        if self.use_c2f && (self.c2f_bottlenecks == 0 || !self.base_width.is_multiple_of(2)) {
            return bad("c2f needs >= 1 bottleneck and an even base width".into());
        }
        if self.attention.kind != AttentionKind::None {
            if self.attention.channels != self.bottleneck_channels() {
                return bad(format!(
                    "attention configured for {} channels but the bottleneck has {}",
                    self.attention.channels,
                    self.bottleneck_channels()
                ));
            }
            self.attention.validate()?;
        }
        if self.attention.kind.uses_self_attention() && self.mhsa_blocks == 0 {
            return bad("mhsa_blocks must be >= 1".into());
        }
        Ok(())
    }
}

/// Parameter count of the model without attention or C2f, for input channels
/// `i`, base width `b` and depth `d`:
///
/// ```text
///   stem      9*i*b + b
/// + stages    sum_{s=1..d} [ 9*w(s-1)*w(s) + w(s)  +  2*(9*w(s)^2 + w(s)) ]
/// + head      sum_{s=1..d} [ 9*w(s)*w(s-1) + w(s-1) ]
/// + output    b + 1
/// ```
/// where `w(s) = b * 2^s`.
pub fn plain_param_count(in_channels: usize, base_width: usize, depth: usize) -> usize {
    let w = |s: usize| base_width << s;
    let mut total = 9 * in_channels * base_width + base_width;
    for s in 1..=depth {
        total += 9 * w(s - 1) * w(s) + w(s);
        total += 2 * (9 * w(s) * w(s) + w(s));
        total += 9 * w(s) * w(s - 1) + w(s - 1);
    }
    total + base_width + 1
}

fn conv_specs(specs: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize, k: usize) {
    let fan_in = c_in * k * k;
    specs.push(ParamSpec::relu_weight(
        join(name, "w"),
        [c_out, c_in, k, k],
        fan_in,
    ));
    specs.push(ParamSpec::bias(join(name, "b"), c_out));
}

fn mhsa_scope(i: usize) -> String {
    format!("neck.mhsa{i}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
}

impl Model {
    /// Parameter specifications in construction order.
    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        conv_specs(
            &mut specs,
            "backbone.stem",
            cfg.in_channels,
            cfg.base_width,
            3,
        );
        for s in 1..=cfg.depth {
            let (c_in, c) = (cfg.stage_width(s - 1), cfg.stage_width(s));
            let stage = format!("backbone.stage{s}");
            conv_specs(&mut specs, &join(&stage, "down"), c_in, c, 3);
            if cfg.use_c2f {
                specs.extend(c2f_params(&join(&stage, "c2f"), c, cfg.c2f_bottlenecks));
            } else {
                conv_specs(&mut specs, &join(&stage, "conv1"), c, c, 3);
                conv_specs(&mut specs, &join(&stage, "conv2"), c, c, 3);
            }
        }
        let att = &cfg.attention;
        let spatial = cfg.bottleneck_size();
        match att.kind {
            AttentionKind::None => {}
            AttentionKind::Cbam => specs.extend(attention::cbam_params("backbone.cbam", att)),
            AttentionKind::Coord => specs.extend(attention::coord_params("neck.coord", att)),
            AttentionKind::Mhsa | AttentionKind::Dual => {
                if att.kind == AttentionKind::Dual {
                    specs.extend(attention::cbam_params("neck.cbam", att));
                }
                for i in 0..cfg.mhsa_blocks {
                    specs.extend(attention::mhsa_params(&mhsa_scope(i), att, spatial));
                }
            }
        }
        for j in 1..=cfg.depth {
            let (c_in, c) = (
                cfg.stage_width(cfg.depth - j + 1),
                cfg.stage_width(cfg.depth - j),
            );
            conv_specs(&mut specs, &format!("head.up{j}"), c_in, c, 3);
        }
        specs.push(ParamSpec::weight(
            "head.out.w",
            [1, cfg.base_width, 1, 1],
            cfg.base_width,
        ));
        specs.push(ParamSpec::bias("head.out.b", 1));
        specs
    }

    pub fn new(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let specs = Model::specs(&cfg);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(CheckpointError::ShapeMismatch(format!(
                "config implies {} parameters, got {}",
                specs.len(),
                params.len()
            ))));
        }
        for spec in &specs {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::Checkpoint(CheckpointError::ShapeMismatch(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                ))));
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        let step = 1usize << self.cfg.depth;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::shape(
                "forward",
                format!("spatial size {h}x{w} is not divisible by {step}"),
            ));
        }
        if self.cfg.attention.kind.uses_self_attention() && (h, w) != self.cfg.input_size {
            return Err(Error::shape(
                "forward",
                format!(
                    "self-attention position embeddings are sized for {:?}, got {h}x{w}",
                    self.cfg.input_size
                ),
            ));
        }
        Ok(())
    }

    /// Probability map `(N,1,H,W)` with parameters already bound on `tape`.
    pub fn forward_bound(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let cfg = &self.cfg;
        let root = bound.scope("");
        let conv = |tape: &mut Tape,
                    x: Var,
                    name: &str,
                    stride: usize,
                    pad: usize,
                    relu: bool|
         -> Result<Var> {
            let p = root.nest(name);
            let y = tape.conv2d(x, p.var("w")?, Some(p.var("b")?), stride, pad)?;
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };

        let mut h = conv(tape, x, "backbone.stem", 1, 1, true)?;
        for s in 1..=cfg.depth {
            let stage = format!("backbone.stage{s}");
            h = conv(tape, h, &join(&stage, "down"), 2, 1, true)?;
            if cfg.use_c2f {
                h = c2f_block(
                    tape,
                    h,
                    &root.nest(&join(&stage, "c2f")),
                    cfg.c2f_bottlenecks,
                )?;
            } else {
                h = conv(tape, h, &join(&stage, "conv1"), 1, 1, true)?;
                h = conv(tape, h, &join(&stage, "conv2"), 1, 1, true)?;
            }
        }

        let att = &cfg.attention;
        match att.kind {
            AttentionKind::None => {}
            AttentionKind::Cbam => h = attention::cbam_block(tape, h, &root.nest("backbone.cbam"))?,
            AttentionKind::Coord => {
                h = attention::coord_attention(tape, h, &root.nest("neck.coord"), att)?
            }
            AttentionKind::Mhsa | AttentionKind::Dual => {
                if att.kind == AttentionKind::Dual {
                    h = attention::cbam_block(tape, h, &root.nest("neck.cbam"))?;
                }
                for i in 0..cfg.mhsa_blocks {
                    h = attention::self_attention_2d(tape, h, &root.nest(&mhsa_scope(i)), att)?;
                }
            }
        }

        for j in 1..=cfg.depth {
            h = tape.upsample2x(h)?;
            h = conv(tape, h, &format!("head.up{j}"), 1, 1, true)?;
        }
        let logits = conv(tape, h, "head.out", 1, 0, false)?;
        tape.sigmoid(logits)
    }

    /// Binds the parameters as trainable leaves and runs the forward pass.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Bound, Var)> {
        let bound = self.params.bind(tape);
        let y = self.forward_bound(tape, &bound, x)?;
        Ok((bound, y))
    }

    /// Inference-only forward pass on a batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_with(&mut tape, false);
        let x = tape.constant(batch.clone());
        let y = self.forward_bound(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Builds a model with freshly initialised parameters; the result depends only
/// on `(cfg, seed)`.
pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let params = ParamSet::from_specs(&Model::specs(&cfg), seed)?;
    Ok(Model { cfg, params })
}
