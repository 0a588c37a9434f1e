use super::{check_channels, AttentionConfig};
use crate::error::Result;
use crate::params::{join, ParamSpec, Scope};
use crate::tensor::{Axis, Tape, Var};

pub fn coord_params(prefix: &str, cfg: &AttentionConfig) -> Vec<ParamSpec> {
    let (c, mid) = (cfg.channels, cfg.coord_hidden());
    vec![
        ParamSpec::weight(join(prefix, "reduce.w"), [mid, c, 1, 1], c),
        ParamSpec::bias(join(prefix, "reduce.b"), mid),
        ParamSpec::weight(join(prefix, "expand_h.w"), [c, mid, 1, 1], mid),
        ParamSpec::bias(join(prefix, "expand_h.b"), c),
        ParamSpec::weight(join(prefix, "expand_w.w"), [c, mid, 1, 1], mid),
        ParamSpec::bias(join(prefix, "expand_w.b"), c),
    ]
}

/// Coordinate attention.
///
/// Row descriptors `z_h (N,C,H,1)` average each row, column descriptors
/// `z_w (N,C,1,W)` average each column. Both are laid side by side as
/// `(N,C,1,H+W)`, squeezed by a shared 1x1 conv + ReLU, split back, expanded by
/// one 1x1 conv per direction and squashed by a sigmoid. The output is
/// `x * g_h * g_w` with the row gate broadcast over columns and vice versa.
pub fn coord_attention(
    tape: &mut Tape,
    x: Var,
    p: &Scope<'_>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    check_channels(tape, x, cfg, "coord_attention")?;
    let [n, c, h, w] = tape.shape(x);

    let z_h = tape.pool_directional(x, Axis::Width)?;
    let z_h = tape.reshape(z_h, [n, c, 1, h])?;
    let z_w = tape.pool_directional(x, Axis::Height)?;
    let joint = tape.concat(&[z_h, z_w], Axis::Width)?;

    let squeezed = tape.conv2d(joint, p.var("reduce.w")?, Some(p.var("reduce.b")?), 1, 0)?;
    let squeezed = tape.relu(squeezed)?;
    let parts = tape.split(squeezed, Axis::Width, &[h, w])?;
    let mid = tape.shape(squeezed)[1];
    let t_h = tape.reshape(parts[0], [n, mid, h, 1])?;
    let t_w = parts[1];

    let g_h = tape.conv2d(t_h, p.var("expand_h.w")?, Some(p.var("expand_h.b")?), 1, 0)?;
    let g_h = tape.sigmoid(g_h)?;
    let g_w = tape.conv2d(t_w, p.var("expand_w.w")?, Some(p.var("expand_w.b")?), 1, 0)?;
    let g_w = tape.sigmoid(g_w)?;

    let y = tape.mul(x, g_h)?;
    tape.mul(y, g_w)
}
