//! Forward kernels and backward rules for the tape operations.

use super::gemm::{gemm, Mat};
use super::tape::{check_same, zeros_like, Tape, Var};
use super::{numel, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    pub fn dim(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }
}

/// Legal shapes for the second operand of [`Tape::mul`] relative to `x: (N,C,H,W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePattern {
    /// Identical shapes.
    Same,
    /// `(N,C,1,1)`: one gate per channel.
    Channel,
    /// `(N,1,H,W)`: one gate per position.
    Spatial,
    /// `(N,C,H,1)`: one gate per channel and row.
    Row,
    /// `(N,C,1,W)`: one gate per channel and column.
    Column,
}

impl GatePattern {
    pub fn detect(x: Shape, gate: Shape) -> Result<Self> {
        let [n, c, h, w] = x;
        let pattern = if gate == x {
            GatePattern::Same
        } else if gate == [n, c, 1, 1] {
            GatePattern::Channel
        } else if gate == [n, 1, h, w] {
            GatePattern::Spatial
        } else if gate == [n, c, h, 1] {
            GatePattern::Row
        } else if gate == [n, c, 1, w] {
            GatePattern::Column
        } else {
            return Err(Error::shape(
                "mul",
                format!("{gate:?} is not a gate shape for {x:?}"),
            ));
        };
        Ok(pattern)
    }
}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    PoolGlobal {
        x: Var,
        argmax: Option<Vec<usize>>,
    },
    PoolDirectional {
        x: Var,
        axis: Axis,
    },
    PoolChannels {
        x: Var,
        argmax: Option<Vec<usize>>,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        pattern: GatePattern,
    },
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SegLoss {
        prob: Var,
        target: Var,
        w_bce: f64,
        w_dice: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::PoolGlobal { .. } => "pool_global",
            Op::PoolDirectional { .. } => "pool_directional",
            Op::PoolChannels { .. } => "pool_across_channels",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Upsample2x { .. } => "upsample2x",
            Op::Softmax { .. } => "softmax_last",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SegLoss { .. } => "seg_loss",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::SegLoss { prob, target, .. } => vec![*prob, *target],
            Op::Concat { parts, .. } => parts.clone(),
            Op::PoolGlobal { x, .. }
            | Op::PoolDirectional { x, .. }
            | Op::PoolChannels { x, .. }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Upsample2x { x }
            | Op::Softmax { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape(), x.data().iter().map(|&v| f(v)).collect())
}

// ---------------------------------------------------------------- convolution

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Self> {
        let [n, ci, h, wd] = x;
        let [co, wci, kh, kw] = w;
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels but kernel {w:?} expects {wci}"),
            ));
        }
        if kh != kw || kh == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {w:?} is not square"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let extent = |len: usize| -> Result<usize> {
            if len + 2 * pad < kh {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh} larger than padded extent {}", len + 2 * pad),
                ));
            }
            Ok((len + 2 * pad - kh) / stride + 1)
        };
        let ho = extent(h)?;
        let wo = extent(wd)?;
        Ok(ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn kdim(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, xs: &[f64], col: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.ci {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &xs[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, slot) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *slot = if iw < 0 || iw >= self.w as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.ci {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, b: Option<&Tensor>, out: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [1, out, 1, 1] {
            return Err(Error::shape(
                op,
                format!("bias {:?} should be [1, {out}, 1, 1]", b.shape()),
            ));
        }
    }
    Ok(())
}

pub(crate) fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    check_bias("conv2d", b, g.co)?;
    let (kdim, p) = (g.kdim(), g.positions());
    let in_per = g.ci * g.h * g.w;
    let mut out = vec![0.0; g.n * g.co * p];
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * p]
    };
    for s in 0..g.n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let cols: &[f64] = if g.pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        let ys = &mut out[s * g.co * p..(s + 1) * g.co * p];
        gemm(
            Mat::new(w.data(), g.co, kdim),
            Mat::new(cols, kdim, p),
            0.0,
            ys,
        );
        if let Some(b) = b {
            for (c, chunk) in ys.chunks_mut(p).enumerate() {
                let bias = b.data()[c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Ok(Tensor::from_parts([g.n, g.co, g.ho, g.wo], out))
}

fn conv2d_backward(
    tape: &Tape,
    (x, w, b): (Var, Var, Option<Var>),
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Vec<(Var, Tensor)> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let g = ConvGeom::new(xv.shape(), wv.shape(), stride, pad).expect("validated in forward");
    let (kdim, p) = (g.kdim(), g.positions());
    let in_per = g.ci * g.h * g.w;
    let want_x = tape.requires_grad(x);
    let want_w = tape.requires_grad(w);
    let mut dx = want_x.then(|| vec![0.0; xv.len()]);
    let mut dw = want_w.then(|| vec![0.0; wv.len()]);
    let mut col = vec![0.0; if g.pointwise() { 0 } else { kdim * p }];
    let mut dcol = vec![
        0.0;
        if want_x && !g.pointwise() {
            kdim * p
        } else {
            0
        }
    ];
    for s in 0..g.n {
        let dys = &dy.data()[s * g.co * p..(s + 1) * g.co * p];
        if let Some(dw) = dw.as_mut() {
            let xs = &xv.data()[s * in_per..(s + 1) * in_per];
            let cols: &[f64] = if g.pointwise() {
                xs
            } else {
                g.im2col(xs, &mut col);
                &col
            };
            gemm(Mat::new(dys, g.co, p), Mat::new(cols, kdim, p).t(), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            let wt = Mat::new(wv.data(), g.co, kdim).t();
            if g.pointwise() {
                gemm(wt, Mat::new(dys, g.co, p), 0.0, dxs);
            } else {
                gemm(wt, Mat::new(dys, g.co, p), 0.0, &mut dcol);
                g.col2im(&dcol, dxs);
            }
        }
    }
    let mut out = Vec::new();
    if let Some(dx) = dx {
        out.push((x, Tensor::from_parts(xv.shape(), dx)));
    }
    if let Some(dw) = dw {
        out.push((w, Tensor::from_parts(wv.shape(), dw)));
    }
    if let Some(b) = b {
        out.push((b, channel_sums(dy)));
    }
    out
}

/// Sum of `t` over batch and spatial axes, shaped as a `(1, C, 1, 1)` bias.
fn channel_sums(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut sums = vec![0.0; c];
    for (i, chunk) in t.data().chunks(h * w).enumerate() {
        sums[i % c] += chunk.iter().sum::<f64>();
    }
    debug_assert_eq!(t.len(), n * c * h * w);
    Tensor::from_parts([1, c, 1, 1], sums)
}

// ---------------------------------------------------------------- linear / matmul

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [n, c, h, wd] = x.shape();
    let features = c * h * wd;
    let [out, inp, one_a, one_b] = w.shape();
    if inp != features || one_a != 1 || one_b != 1 {
        return Err(Error::shape(
            "linear",
            format!(
                "weight {:?} does not map {features} input features",
                w.shape()
            ),
        ));
    }
    check_bias("linear", b, out)?;
    let mut y = vec![0.0; n * out];
    gemm(
        Mat::new(x.data(), n, features),
        Mat::new(w.data(), out, features).t(),
        0.0,
        &mut y,
    );
    if let Some(b) = b {
        for row in y.chunks_mut(out) {
            row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
    }
    Ok(Tensor::from_parts([n, out, 1, 1], y))
}

fn linear_backward(tape: &Tape, x: Var, w: Var, b: Option<Var>, dy: &Tensor) -> Vec<(Var, Tensor)> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let n = xv.shape()[0];
    let features = xv.len() / n.max(1);
    let out = wv.shape()[0];
    let mut grads = Vec::new();
    if tape.requires_grad(x) {
        let mut dx = vec![0.0; xv.len()];
        gemm(
            Mat::new(dy.data(), n, out),
            Mat::new(wv.data(), out, features),
            0.0,
            &mut dx,
        );
        grads.push((x, Tensor::from_parts(xv.shape(), dx)));
    }
    if tape.requires_grad(w) {
        let mut dw = vec![0.0; wv.len()];
        gemm(
            Mat::new(dy.data(), n, out).t(),
            Mat::new(xv.data(), n, features),
            0.0,
            &mut dw,
        );
        grads.push((w, Tensor::from_parts(wv.shape(), dw)));
    }
    if let Some(b) = b {
        grads.push((b, channel_sums(dy)));
    }
    grads
}

struct MatMulGeom {
    groups: usize,
    a_shared: bool,
    b_shared: bool,
    m: usize,
    k: usize,
    p: usize,
    out: Shape,
}

impl MatMulGeom {
    fn new(a: Shape, b: Shape, ta: bool, tb: bool) -> Result<Self> {
        let ga = a[0] * a[1];
        let gb = b[0] * b[1];
        let (lead, a_shared, b_shared) = if a[..2] == b[..2] {
            ([a[0], a[1]], false, false)
        } else if ga == 1 {
            ([b[0], b[1]], true, false)
        } else if gb == 1 {
            ([a[0], a[1]], false, true)
        } else {
            return Err(Error::shape(
                "matmul",
                format!("leading axes of {a:?} and {b:?} neither match nor broadcast"),
            ));
        };
        let (m, k) = if ta { (a[3], a[2]) } else { (a[2], a[3]) };
        let (kb, p) = if tb { (b[3], b[2]) } else { (b[2], b[3]) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {a:?} (t={ta}) x {b:?} (t={tb})"),
            ));
        }
        Ok(MatMulGeom {
            groups: lead[0] * lead[1],
            a_shared,
            b_shared,
            m,
            k,
            p,
            out: [lead[0], lead[1], m, p],
        })
    }
}

fn op_mat(data: &[f64], shape: Shape, group: usize, shared: bool, trans: bool) -> Mat<'_> {
    let size = shape[2] * shape[3];
    let g = if shared { 0 } else { group };
    let m = Mat::new(&data[g * size..(g + 1) * size], shape[2], shape[3]);
    if trans {
        m.t()
    } else {
        m
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let g = MatMulGeom::new(a.shape(), b.shape(), ta, tb)?;
    let mut out = vec![0.0; numel(g.out)];
    for grp in 0..g.groups {
        gemm(
            op_mat(a.data(), a.shape(), grp, g.a_shared, ta),
            op_mat(b.data(), b.shape(), grp, g.b_shared, tb),
            0.0,
            &mut out[grp * g.m * g.p..(grp + 1) * g.m * g.p],
        );
    }
    Ok(Tensor::from_parts(g.out, out))
}

fn matmul_backward(
    tape: &Tape,
    (a, b): (Var, Var),
    ta: bool,
    tb: bool,
    dy: &Tensor,
) -> Vec<(Var, Tensor)> {
    let av = tape.value(a);
    let bv = tape.value(b);
    let g = MatMulGeom::new(av.shape(), bv.shape(), ta, tb).expect("validated in forward");
    let mut grads = Vec::new();
    let a_size = g.m * g.k;
    let b_size = g.k * g.p;
    if tape.requires_grad(a) {
        let mut da = vec![0.0; av.len()];
        for grp in 0..g.groups {
            let dc = Mat::new(&dy.data()[grp * g.m * g.p..][..g.m * g.p], g.m, g.p);
            let opb = op_mat(bv.data(), bv.shape(), grp, g.b_shared, tb);
            let slot = if g.a_shared { 0 } else { grp };
            let dst = &mut da[slot * a_size..(slot + 1) * a_size];
            if ta {
                gemm(opb, dc.t(), 1.0, dst);
            } else {
                gemm(dc, opb.t(), 1.0, dst);
            }
        }
        grads.push((a, Tensor::from_parts(av.shape(), da)));
    }
    if tape.requires_grad(b) {
        let mut db = vec![0.0; bv.len()];
        for grp in 0..g.groups {
            let dc = Mat::new(&dy.data()[grp * g.m * g.p..][..g.m * g.p], g.m, g.p);
            let opa = op_mat(av.data(), av.shape(), grp, g.a_shared, ta);
            let slot = if g.b_shared { 0 } else { grp };
            let dst = &mut db[slot * b_size..(slot + 1) * b_size];
            if tb {
                gemm(dc.t(), opa, 1.0, dst);
            } else {
                gemm(opa.t(), dc, 1.0, dst);
            }
        }
        grads.push((b, Tensor::from_parts(bv.shape(), db)));
    }
    grads
}

// ---------------------------------------------------------------- pooling

pub(crate) fn pool_global(x: &Tensor, mode: PoolMode) -> Result<(Tensor, Option<Vec<usize>>)> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("pool_global", "empty spatial extent"));
    }
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::new();
    for (i, chunk) in x.data().chunks(hw).enumerate() {
        match mode {
            PoolMode::Avg => out.push(chunk.iter().sum::<f64>() / hw as f64),
            PoolMode::Max => {
                let (best, value) = first_argmax(chunk.iter().copied());
                out.push(value);
                argmax.push(i * hw + best);
            }
        }
    }
    let argmax = (mode == PoolMode::Max).then_some(argmax);
    Ok((Tensor::from_parts([n, c, 1, 1], out), argmax))
}

/// Index and value of the first maximum.
fn first_argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub(crate) fn pool_directional(x: &Tensor, axis: Axis) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let d = x.data();
    match axis {
        Axis::Width => {
            if w == 0 {
                return Err(Error::shape("pool_directional", "zero width"));
            }
            let out = d
                .chunks(w)
                .map(|row| row.iter().sum::<f64>() / w as f64)
                .collect();
            Ok(Tensor::from_parts([n, c, h, 1], out))
        }
        Axis::Height => {
            if h == 0 {
                return Err(Error::shape("pool_directional", "zero height"));
            }
            let mut out = vec![0.0; n * c * w];
            for (plane, dst) in d.chunks(h * w).zip(out.chunks_mut(w)) {
                for row in plane.chunks(w) {
                    dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                dst.iter_mut().for_each(|o| *o /= h as f64);
            }
            Ok(Tensor::from_parts([n, c, 1, w], out))
        }
        _ => Err(Error::shape(
            "pool_directional",
            "axis must be height or width",
        )),
    }
}

pub(crate) fn pool_across_channels(
    x: &Tensor,
    mode: PoolMode,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let [n, c, h, w] = x.shape();
    if c == 0 {
        return Err(Error::shape("pool_across_channels", "no channels"));
    }
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0.0; n * hw];
    let mut argmax = vec![0usize; if mode == PoolMode::Max { n * hw } else { 0 }];
    for s in 0..n {
        for p in 0..hw {
            let at = |ch: usize| d[(s * c + ch) * hw + p];
            match mode {
                PoolMode::Avg => out[s * hw + p] = (0..c).map(at).sum::<f64>() / c as f64,
                PoolMode::Max => {
                    let (best, value) = first_argmax((0..c).map(at));
                    out[s * hw + p] = value;
                    argmax[s * hw + p] = (s * c + best) * hw + p;
                }
            }
        }
    }
    let argmax = (mode == PoolMode::Max).then_some(argmax);
    Ok((Tensor::from_parts([n, 1, h, w], out), argmax))
}

// ---------------------------------------------------------------- elementwise

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("add", a.shape(), b.shape())?;
    Ok(Tensor::from_parts(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    ))
}

/// Flat index into the gate for every element of `x`.
fn gate_index(x: Shape, pattern: GatePattern) -> impl Fn(usize, usize, usize, usize) -> usize {
    let [_, c, h, w] = x;
    move |n, ch, i, j| match pattern {
        GatePattern::Same => ((n * c + ch) * h + i) * w + j,
        GatePattern::Channel => n * c + ch,
        GatePattern::Spatial => (n * h + i) * w + j,
        GatePattern::Row => (n * c + ch) * h + i,
        GatePattern::Column => (n * c + ch) * w + j,
    }
}

fn for_each_index(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [n, c, h, w] = shape;
    let mut flat = 0;
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    f(flat, s, ch, i, j);
                    flat += 1;
                }
            }
        }
    }
}

pub(crate) fn mul(a: &Tensor, b: &Tensor, pattern: GatePattern) -> Tensor {
    if pattern == GatePattern::Same {
        return Tensor::from_parts(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
        );
    }
    let idx = gate_index(a.shape(), pattern);
    let mut out = vec![0.0; a.len()];
    for_each_index(a.shape(), |flat, s, c, i, j| {
        out[flat] = a.data()[flat] * b.data()[idx(s, c, i, j)];
    });
    Tensor::from_parts(a.shape(), out)
}

fn mul_backward(
    tape: &Tape,
    a: Var,
    b: Var,
    pattern: GatePattern,
    dy: &Tensor,
) -> Vec<(Var, Tensor)> {
    let av = tape.value(a);
    let bv = tape.value(b);
    let mut grads = Vec::new();
    if tape.requires_grad(a) {
        grads.push((a, mul(dy, bv, pattern)));
    }
    if tape.requires_grad(b) {
        let idx = gate_index(av.shape(), pattern);
        let mut db = vec![0.0; bv.len()];
        for_each_index(av.shape(), |flat, s, c, i, j| {
            db[idx(s, c, i, j)] += dy.data()[flat] * av.data()[flat];
        });
        grads.push((b, Tensor::from_parts(bv.shape(), db)));
    }
    grads
}

// ---------------------------------------------------------------- layout

/// (outer, extent, inner) decomposition around `axis`.
fn around(shape: Shape, axis: Axis) -> (usize, usize, usize) {
    let d = axis.dim();
    (
        shape[..d].iter().product(),
        shape[d],
        shape[d + 1..].iter().product(),
    )
}

pub(crate) fn concat(parts: &[&Tensor], axis: Axis) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let d = axis.dim();
    let mut template = first.shape();
    template[d] = 0;
    let mut shape = template;
    for p in parts {
        let mut s = p.shape();
        let extent = s[d];
        s[d] = 0;
        if s != template {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {d}", p.shape(), first.shape()),
            ));
        }
        shape[d] += extent;
    }
    let (outer, _, inner) = around(shape, axis);
    let mut out = Vec::with_capacity(numel(shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[d] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice(x: &Tensor, axis: Axis, start: usize, len: usize) -> Result<Tensor> {
    let (outer, extent, inner) = around(x.shape(), axis);
    if start + len > extent {
        return Err(Error::shape(
            "slice",
            format!("[{start}, {}) exceeds extent {extent}", start + len),
        ));
    }
    let mut shape = x.shape();
    shape[axis.dim()] = len;
    let mut out = Vec::with_capacity(numel(shape));
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn upsample2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for row in x.data().chunks(w) {
        let mut wide = Vec::with_capacity(2 * w);
        for &v in row {
            wide.push(v);
            wide.push(v);
        }
        out.extend_from_slice(&wide);
        out.extend_from_slice(&wide);
    }
    Tensor::from_parts([n, c, 2 * h, 2 * w], out)
}

// ---------------------------------------------------------------- softmax / losses

pub(crate) fn softmax_last(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let [_, _, h, w] = x.shape();
    if w == 0 {
        return Err(Error::shape("softmax_last", "empty last axis"));
    }
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::shape(
                "softmax_last",
                format!("mask has {} entries, expected {}", m.len(), h * w),
            ));
        }
        if m.chunks(w).any(|row| !row.iter().any(|&keep| keep)) {
            return Err(Error::shape("softmax_last", "mask row excludes everything"));
        }
    }
    let mut out = vec![0.0; x.len()];
    for (r, (row, dst)) in x.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[(r % h) * w + j]);
        let max = (0..w)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..w {
            if keep(j) {
                dst[j] = (row[j] - max).exp();
                total += dst[j];
            }
        }
        dst.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_parts(x.shape(), out))
}

pub(crate) const BCE_EPS: f64 = 1e-7;
pub(crate) const DICE_SMOOTH: f64 = 1.0;

/// BCE is averaged over every element; Dice is computed per sample and averaged
/// over the batch, so the value does not depend on how samples are grouped.
pub(crate) fn seg_loss_value(p: &Tensor, g: &Tensor, w_bce: f64, w_dice: f64) -> Result<f64> {
    check_same("seg_loss", p.shape(), g.shape())?;
    let m = p.len() as f64;
    let n = p.shape()[0];
    let per = p.len() / n.max(1);
    let mut bce = 0.0;
    let mut dice = 0.0;
    for (ps, gs) in p.data().chunks(per.max(1)).zip(g.data().chunks(per.max(1))) {
        let (mut inter, mut total) = (0.0, 0.0);
        for (&pi, &gi) in ps.iter().zip(gs) {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            bce -= gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
            inter += pi * gi;
            total += pi + gi;
        }
        dice += 1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH);
    }
    Ok(w_bce * bce / m + w_dice * dice / n as f64)
}

fn seg_loss_grad(p: &Tensor, g: &Tensor, w_bce: f64, w_dice: f64) -> Tensor {
    let m = p.len() as f64;
    let n = p.shape()[0];
    let per = (p.len() / n.max(1)).max(1);
    let mut grad = Vec::with_capacity(p.len());
    for (ps, gs) in p.data().chunks(per).zip(g.data().chunks(per)) {
        let (mut inter, mut total) = (0.0, 0.0);
        for (&pi, &gi) in ps.iter().zip(gs) {
            inter += pi * gi;
            total += pi + gi;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = total + DICE_SMOOTH;
        grad.extend(ps.iter().zip(gs).map(|(&pi, &gi)| {
            let d_bce = if pi > BCE_EPS && pi < 1.0 - BCE_EPS {
                -(gi / pi - (1.0 - gi) / (1.0 - pi)) / m
            } else {
                0.0
            };
            let d_dice = -(2.0 * gi * den - num) / (den * den) / n as f64;
            w_bce * d_bce + w_dice * d_dice
        }));
    }
    Tensor::from_parts(p.shape(), grad)
}

// ---------------------------------------------------------------- backward dispatch

pub(crate) fn backward(tape: &Tape, out: Var, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let node = tape.node(out);
    let y = &node.value;
    let grads = match &node.op {
        Op::Leaf => vec![],
        &Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => conv2d_backward(tape, (x, w, b), stride, pad, dy),
        &Op::Linear { x, w, b } => linear_backward(tape, x, w, b, dy),
        &Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => matmul_backward(tape, (a, b), trans_a, trans_b, dy),
        Op::PoolGlobal { x, argmax } => {
            let xv = tape.value(*x);
            let [_, _, h, w] = xv.shape();
            let mut dx = vec![0.0; xv.len()];
            match argmax {
                Some(idx) => idx.iter().zip(dy.data()).for_each(|(&i, g)| dx[i] += g),
                None => {
                    let hw = (h * w) as f64;
                    for (chunk, g) in dx.chunks_mut(h * w).zip(dy.data()) {
                        chunk.fill(g / hw);
                    }
                }
            }
            vec![(*x, Tensor::from_parts(xv.shape(), dx))]
        }
        &Op::PoolDirectional { x, axis } => {
            let xv = tape.value(x);
            let [_, _, h, w] = xv.shape();
            let mut dx = vec![0.0; xv.len()];
            match axis {
                Axis::Width => {
                    for (row, g) in dx.chunks_mut(w).zip(dy.data()) {
                        row.fill(g / w as f64);
                    }
                }
                _ => {
                    for (plane, gs) in dx.chunks_mut(h * w).zip(dy.data().chunks(w)) {
                        for row in plane.chunks_mut(w) {
                            row.iter_mut().zip(gs).for_each(|(d, g)| *d = g / h as f64);
                        }
                    }
                }
            }
            vec![(x, Tensor::from_parts(xv.shape(), dx))]
        }
        Op::PoolChannels { x, argmax } => {
            let xv = tape.value(*x);
            let [n, c, h, w] = xv.shape();
            let hw = h * w;
            let mut dx = vec![0.0; xv.len()];
            match argmax {
                Some(idx) => idx.iter().zip(dy.data()).for_each(|(&i, g)| dx[i] += g),
                None => {
                    for s in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[(s * c + ch) * hw + p] = dy.data()[s * hw + p] / c as f64;
                            }
                        }
                    }
                }
            }
            vec![(*x, Tensor::from_parts(xv.shape(), dx))]
        }
        &Op::Sigmoid { x } => {
            let dx = y
                .data()
                .iter()
                .zip(dy.data())
                .map(|(s, g)| g * s * (1.0 - s))
                .collect();
            vec![(x, Tensor::from_parts(y.shape(), dx))]
        }
        &Op::Relu { x } => {
            let xv = tape.value(x);
            let dx = xv
                .data()
                .iter()
                .zip(dy.data())
                .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            vec![(x, Tensor::from_parts(y.shape(), dx))]
        }
        &Op::Add { a, b } => vec![(a, dy.clone()), (b, dy.clone())],
        &Op::Mul { a, b, pattern } => mul_backward(tape, a, b, pattern, dy),
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = tape.shape(p)[axis.dim()];
                grads.push((p, slice(dy, *axis, start, len)?));
                start += len;
            }
            grads
        }
        &Op::Slice { x, axis, start } => {
            let xv = tape.value(x);
            let (outer, extent, inner) = around(xv.shape(), axis);
            let len = y.shape()[axis.dim()];
            let mut dx = zeros_like(xv);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                dx.data_mut()[base..base + len * inner]
                    .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(x, dx)]
        }
        &Op::Reshape { x } => vec![(x, dy.clone().reshape(tape.shape(x))?)],
        &Op::Upsample2x { x } => {
            let xv = tape.value(x);
            let [_, _, h, w] = xv.shape();
            let mut dx = vec![0.0; xv.len()];
            for (plane_in, plane_out) in dx.chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        plane_in[(i / 2) * w + j / 2] += plane_out[i * 2 * w + j];
                    }
                }
            }
            vec![(x, Tensor::from_parts(xv.shape(), dx))]
        }
        &Op::Softmax { x, .. } => {
            let w = y.shape()[3];
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y
                .data()
                .chunks(w)
                .zip(dy.data().chunks(w))
                .zip(dx.chunks_mut(w))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(x, Tensor::from_parts(y.shape(), dx))]
        }
        &Op::Sum { x } => vec![(x, Tensor::full(tape.shape(x), dy.data()[0]))],
        &Op::Mean { x } => {
            let n = tape.value(x).len().max(1) as f64;
            vec![(x, Tensor::full(tape.shape(x), dy.data()[0] / n))]
        }
        &Op::SegLoss {
            prob,
            target,
            w_bce,
            w_dice,
        } => {
            let mut dp = seg_loss_grad(tape.value(prob), tape.value(target), w_bce, w_dice);
            let g = dy.data()[0];
            dp.data_mut().iter_mut().for_each(|v| *v *= g);
            vec![(prob, dp)]
        }
    };
    Ok(grads)
}
