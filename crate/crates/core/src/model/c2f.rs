use crate::error::{Error, Result};
use crate::params::{join, ParamSpec, Scope};
use crate::tensor::{Axis, Tape, Var};

pub fn c2f_params(prefix: &str, channels: usize, bottlenecks: usize) -> Vec<ParamSpec> {
    let (c, half) = (channels, channels / 2);
    let mut specs = vec![
        ParamSpec::weight(join(prefix, "cv1.w"), [c, c, 1, 1], c),
        ParamSpec::bias(join(prefix, "cv1.b"), c),
    ];
    for i in 0..bottlenecks {
        let m = join(prefix, &format!("m{i}"));
        specs.push(ParamSpec::relu_weight(
            join(&m, "conv1.w"),
            [half, half, 3, 3],
            9 * half,
        ));
        specs.push(ParamSpec::bias(join(&m, "conv1.b"), half));
        specs.push(ParamSpec::weight(
            join(&m, "conv2.w"),
            [half, half, 3, 3],
            9 * half,
        ));
        specs.push(ParamSpec::bias(join(&m, "conv2.b"), half));
    }
    let cat = (2 + bottlenecks) * half;
    specs.push(ParamSpec::weight(
        join(prefix, "cv2.w"),
        [c, cat, 1, 1],
        cat,
    ));
    specs.push(ParamSpec::bias(join(prefix, "cv2.b"), c));
    specs
}

/// C2f block: 1x1 conv, split into halves, `bottlenecks` residual 3x3 pairs
/// chained on the second half, concat of both halves and every bottleneck
/// output, 1x1 conv back to `C`.
pub fn c2f_block(tape: &mut Tape, x: Var, p: &Scope<'_>, bottlenecks: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    if !c.is_multiple_of(2) {
        return Err(Error::shape(
            "c2f_block",
            format!("channel count {c} is odd"),
        ));
    }
    let y = tape.conv2d(x, p.var("cv1.w")?, Some(p.var("cv1.b")?), 1, 0)?;
    let halves = tape.split(y, Axis::Channel, &[c / 2, c / 2])?;
    let mut parts = halves.clone();
    let mut cur = halves[1];
    for i in 0..bottlenecks {
        let m = p.nest(&format!("m{i}"));
        let h = tape.conv2d(cur, m.var("conv1.w")?, Some(m.var("conv1.b")?), 1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, m.var("conv2.w")?, Some(m.var("conv2.b")?), 1, 1)?;
        cur = tape.add(cur, h)?;
        parts.push(cur);
    }
    let cat = tape.concat(&parts, Axis::Channel)?;
    tape.conv2d(cat, p.var("cv2.w")?, Some(p.var("cv2.b")?), 1, 0)
}
