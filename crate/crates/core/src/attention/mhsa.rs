use std::sync::Arc;

use super::{check_channels, AttentionConfig, Extent};
use crate::error::Result;
use crate::params::{join, ParamSet, ParamSpec, Scope};
use crate::tensor::{Tape, Tensor, Var};

pub fn mhsa_params(prefix: &str, cfg: &AttentionConfig, (h, w): (usize, usize)) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let d = cfg.head_dim();
    let mut specs = Vec::new();
    for proj in ["q", "k", "v"] {
        specs.push(ParamSpec::weight(
            join(prefix, &format!("{proj}.w")),
            [c, c, 1, 1],
            c,
        ));
        specs.push(ParamSpec::bias(join(prefix, &format!("{proj}.b")), c));
    }
    specs.push(ParamSpec::weight(join(prefix, "rel_h"), [1, 1, d, h], d));
    specs.push(ParamSpec::weight(join(prefix, "rel_w"), [1, 1, d, w], d));
    specs
}

/// `keep[p * P + q]` is true when key position `q` lies in the window of query `p`
/// (positions are row-major over an `h x w` map).
pub fn neighbourhood_mask(h: usize, w: usize, extent: Extent) -> Option<Vec<bool>> {
    let Extent::Local(k) = extent else {
        return None;
    };
    let r = (k / 2) as isize;
    let p = h * w;
    let mut keep = vec![false; p * p];
    for q in 0..p {
        let (qi, qj) = ((q / w) as isize, (q % w) as isize);
        for t in 0..p {
            let (ti, tj) = ((t / w) as isize, (t % w) as isize);
            keep[q * p + t] = (qi - ti).abs() <= r && (qj - tj).abs() <= r;
        }
    }
    Some(keep)
}

/// Broadcast matrix `(1,1,rows,h*w)` with a one wherever position `p` sits in
/// row (`by_row`) or column `index`.
fn expander(h: usize, w: usize, by_row: bool) -> Tensor {
    let rows = if by_row { h } else { w };
    let p = h * w;
    let mut data = vec![0.0; rows * p];
    for pos in 0..p {
        let idx = if by_row { pos / w } else { pos % w };
        data[idx * p + pos] = 1.0;
    }
    Tensor::from_parts([1, 1, rows, p], data)
}

/// Multi-head 2-D self-attention.
///
/// Queries, keys and values are 1x1 convolutions of `x`, split into heads of
/// `C / heads` channels. For a query at `(i, j)` and key at `(a, b)` in its
/// neighbourhood the logit is `q_ij . k_ab + q_ij . (R_h[:, a] + R_w[:, b])`; the
/// output at `(i, j)` is the softmax-weighted sum of `v_ab`. Heads are
/// concatenated back along channels.
pub fn self_attention_2d(
    tape: &mut Tape,
    x: Var,
    p: &Scope<'_>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let [n, c, h, w] = tape.shape(x);
    let (weights, v) = weights_and_values(tape, x, p, cfg)?;
    let y = tape.matmul(v, weights, false, true)?;
    tape.reshape(y, [n, c, h, w])
}

/// Softmax attention weights of [`self_attention_2d`], shaped
/// `(N, heads, H*W, H*W)`: row `p` holds the weights of query position `p`.
pub fn self_attention_weights(
    tape: &mut Tape,
    x: Var,
    p: &Scope<'_>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    Ok(weights_and_values(tape, x, p, cfg)?.0)
}

fn weights_and_values(
    tape: &mut Tape,
    x: Var,
    p: &Scope<'_>,
    cfg: &AttentionConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    check_channels(tape, x, cfg, "self_attention_2d")?;
    let [n, _, h, w] = tape.shape(x);
    let heads = cfg.mhsa_heads;
    let d = cfg.head_dim();
    let positions = h * w;

    let project = |tape: &mut Tape, name: &str| -> Result<Var> {
        let y = tape.conv2d(
            x,
            p.var(&format!("{name}.w"))?,
            Some(p.var(&format!("{name}.b"))?),
            1,
            0,
        )?;
        tape.reshape(y, [n, heads, d, positions])
    };
    let q = project(tape, "q")?;
    let k = project(tape, "k")?;
    let v = project(tape, "v")?;

    let e_h = tape.constant(expander(h, w, true));
    let e_w = tape.constant(expander(h, w, false));
    let r_h = tape.matmul(p.var("rel_h")?, e_h, false, false)?;
    let r_w = tape.matmul(p.var("rel_w")?, e_w, false, false)?;
    let r = tape.add(r_h, r_w)?;

    let content = tape.matmul(q, k, true, false)?;
    let position = tape.matmul(q, r, true, false)?;
    let logits = tape.add(content, position)?;
    let mask = neighbourhood_mask(h, w, cfg.mhsa_extent).map(Arc::new);
    let weights = tape.softmax_last(logits, mask)?;
    Ok((weights, v))
}

/// Direct per-pixel evaluation of the same block with nested loops, reading
/// parameters `{prefix}.q.w`, ... from `params`. Not differentiable.
pub fn self_attention_reference(
    x: &Tensor,
    params: &ParamSet,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let [n, c, h, w] = x.shape();
    let heads = cfg.mhsa_heads;
    let d = cfg.head_dim();
    let get = |name: &str| params.get(&join(prefix, name));
    let project = |name: &str| -> Result<Vec<f64>> {
        let wt = get(&format!("{name}.w"))?;
        let b = get(&format!("{name}.b"))?;
        let mut out = vec![0.0; n * c * h * w];
        for s in 0..n {
            for o in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            acc += wt.at(o, ci, 0, 0) * x.at(s, ci, i, j);
                        }
                        out[((s * c + o) * h + i) * w + j] = acc;
                    }
                }
            }
        }
        Ok(out)
    };
    let (q, k, v) = (project("q")?, project("k")?, project("v")?);
    let (rel_h, rel_w) = (get("rel_h")?, get("rel_w")?);
    let at = |t: &[f64], s: usize, ch: usize, i: usize, j: usize| t[((s * c + ch) * h + i) * w + j];
    let radius = match cfg.mhsa_extent {
        Extent::Global => usize::MAX,
        Extent::Local(k) => k / 2,
    };

    let mut out = vec![0.0; n * c * h * w];
    for s in 0..n {
        for head in 0..heads {
            let ch0 = head * d;
            for i in 0..h {
                for j in 0..w {
                    let mut logits = Vec::new();
                    for a in 0..h {
                        for b in 0..w {
                            if a.abs_diff(i) > radius || b.abs_diff(j) > radius {
                                continue;
                            }
                            let mut l = 0.0;
                            for e in 0..d {
                                let qe = at(&q, s, ch0 + e, i, j);
                                let pos = rel_h.data()[e * h + a] + rel_w.data()[e * w + b];
                                l += qe * at(&k, s, ch0 + e, a, b) + qe * pos;
                            }
                            logits.push((a, b, l));
                        }
                    }
                    let max = logits.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = logits.iter().map(|t| (t.2 - max).exp()).sum();
                    for e in 0..d {
                        let y: f64 = logits
                            .iter()
                            .map(|&(a, b, l)| (l - max).exp() / total * at(&v, s, ch0 + e, a, b))
                            .sum();
                        out[((s * c + ch0 + e) * h + i) * w + j] = y;
                    }
                }
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}
