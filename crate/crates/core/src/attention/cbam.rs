use crate::error::{Error, Result};
use crate::params::{join, ParamSpec, Scope};
use crate::tensor::{Axis, PoolMode, Tape, Var};

use super::AttentionConfig;

pub const SPATIAL_KERNEL: usize = 7;

pub fn cbam_params(prefix: &str, cfg: &AttentionConfig) -> Vec<ParamSpec> {
    let (c, hidden) = (cfg.channels, cfg.cbam_hidden());
    let k = SPATIAL_KERNEL;
    vec![
        ParamSpec::weight(join(prefix, "mlp1.w"), [hidden, c, 1, 1], c),
        ParamSpec::bias(join(prefix, "mlp1.b"), hidden),
        ParamSpec::weight(join(prefix, "mlp2.w"), [c, hidden, 1, 1], hidden),
        ParamSpec::bias(join(prefix, "mlp2.b"), c),
        ParamSpec::weight(join(prefix, "spatial.w"), [1, 2, k, k], 2 * k * k),
        ParamSpec::bias(join(prefix, "spatial.b"), 1),
    ]
}

fn shared_mlp(tape: &mut Tape, v: Var, p: &Scope<'_>) -> Result<Var> {
    let h = tape.linear(v, p.var("mlp1.w")?, Some(p.var("mlp1.b")?))?;
    let h = tape.relu(h)?;
    tape.linear(h, p.var("mlp2.w")?, Some(p.var("mlp2.b")?))
}

/// `sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`, shape `(N, C, 1, 1)`.
pub fn cbam_channel_gate(tape: &mut Tape, f: Var, p: &Scope<'_>) -> Result<Var> {
    if tape.shape(f)[1] < 1 {
        return Err(Error::shape("cbam_channel_gate", "input has no channels"));
    }
    let avg = tape.pool_global(f, PoolMode::Avg)?;
    let max = tape.pool_global(f, PoolMode::Max)?;
    let a = shared_mlp(tape, avg, p)?;
    let m = shared_mlp(tape, max, p)?;
    let s = tape.add(a, m)?;
    tape.sigmoid(s)
}

/// `sigmoid(conv7x7([mean_c(F); max_c(F)]))`, shape `(N, 1, H, W)`.
pub fn cbam_spatial_gate(tape: &mut Tape, f: Var, p: &Scope<'_>) -> Result<Var> {
    let avg = tape.pool_across_channels(f, PoolMode::Avg)?;
    let max = tape.pool_across_channels(f, PoolMode::Max)?;
    let stacked = tape.concat(&[avg, max], Axis::Channel)?;
    let logits = tape.conv2d(
        stacked,
        p.var("spatial.w")?,
        Some(p.var("spatial.b")?),
        1,
        SPATIAL_KERNEL / 2,
    )?;
    tape.sigmoid(logits)
}

/// Channel gate first, then the spatial gate computed on the channel-refined map.
pub fn cbam_block(tape: &mut Tape, f: Var, p: &Scope<'_>) -> Result<Var> {
    let mc = cbam_channel_gate(tape, f, p)?;
    let refined = tape.mul(f, mc)?;
    let ms = cbam_spatial_gate(tape, refined, p)?;
    tape.mul(refined, ms)
}
