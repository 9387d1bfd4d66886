//! Primitive operations: shape rules, forward kernels and vector-Jacobian
//! products.

use std::sync::Arc;

use super::shape::{
    broadcast_shape, broadcast_strides, check_axis, for_each_broadcast2, split_at_axis, strides,
};
use super::tensor::{cast, Element, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::ssm::kernel as scan_kernel;

/// A primitive together with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input or constant; no backward rule.
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// `[..., K] x [K, N] -> [..., N]`.
    MatMul,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Silu,
    Tanh,
    Neg,
    Scale(f64),
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Reductions keep the reduced axis with length 1.
    Mean { axis: usize },
    Sum { axis: usize },
    SumAll,
    Reshape { shape: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    Gather { axis: usize, indices: Arc<[usize]> },
    /// Inverse of `Gather` for a permutation index set.
    ScatterInverse { axis: usize, indices: Arc<[usize]> },
    /// Depthwise causal conv: `x [B,L,C]`, `w [C,K]`, `b [C]`.
    CausalConv1d,
    /// Normalization over the last axis: `x [...,D]`, `gamma [D]`, `beta [D]`.
    LayerNorm { eps: f64 },
    BroadcastTo { shape: Vec<usize> },
    /// ZOH-discretized selective recurrence:
    /// `u [B,L,E]`, `delta [B,L,E]`, `a [E,N]`, `b [B,L,N]`, `c [B,L,N]` -> `y [B,L,E]`.
    SelectiveScan { parallel: bool },
}

/// Loosely typed attributes for [`Op::from_kind`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    pub indices: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub eps: Option<f64>,
    pub factor: Option<f64>,
    pub parallel: bool,
}

fn need<V>(v: Option<V>, kind: &str, attr: &str) -> Result<V> {
    v.ok_or_else(|| Error::InvalidArgument(format!("op `{kind}` requires attribute `{attr}`")))
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::Tanh => "tanh",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::SumAll => "sum_all",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::ScatterInverse { .. } => "scatter_inverse",
            Op::CausalConv1d => "causal_conv1d",
            Op::LayerNorm { .. } => "layernorm",
            Op::BroadcastTo { .. } => "broadcast",
            Op::SelectiveScan { .. } => "selective_scan",
        }
    }

    /// Builds an op from its kind name, the string-keyed entry point.
    pub fn from_kind(kind: &str, attrs: &Attrs) -> Result<Op> {
        let axis = || need(attrs.axis, kind, "axis");
        Ok(match kind {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "matmul" => Op::MatMul,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "softplus" => Op::Softplus,
            "sigmoid" => Op::Sigmoid,
            "silu" => Op::Silu,
            "tanh" => Op::Tanh,
            "neg" => Op::Neg,
            "scale" => Op::Scale(need(attrs.factor, kind, "factor")?),
            "softmax" => Op::Softmax { axis: axis()? },
            "log_softmax" => Op::LogSoftmax { axis: axis()? },
            "mean" => Op::Mean { axis: axis()? },
            "sum" => Op::Sum { axis: axis()? },
            "sum_all" => Op::SumAll,
            "reshape" => Op::Reshape {
                shape: need(attrs.shape.clone(), kind, "shape")?,
            },
            "transpose" => Op::Transpose {
                perm: need(attrs.perm.clone(), kind, "perm")?,
            },
            "concat" => Op::Concat { axis: axis()? },
            "narrow" => Op::Narrow {
                axis: axis()?,
                start: need(attrs.start, kind, "start")?,
                len: need(attrs.len, kind, "len")?,
            },
            "gather" => Op::Gather {
                axis: axis()?,
                indices: need(attrs.indices.clone(), kind, "indices")?.into(),
            },
            "scatter_inverse" => Op::ScatterInverse {
                axis: axis()?,
                indices: need(attrs.indices.clone(), kind, "indices")?.into(),
            },
            "causal_conv1d" => Op::CausalConv1d,
            "layernorm" => Op::LayerNorm {
                eps: attrs.eps.unwrap_or(1e-5),
            },
            "broadcast" => Op::BroadcastTo {
                shape: need(attrs.shape.clone(), kind, "shape")?,
            },
            "selective_scan" => Op::SelectiveScan {
                parallel: attrs.parallel,
            },
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul => Some(2),
            Op::CausalConv1d | Op::LayerNorm { .. } => Some(3),
            Op::SelectiveScan { .. } => Some(5),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

// ---------------------------------------------------------------------------
// forward

pub(crate) fn forward<T: Element>(op: &Op, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if let Some(n) = op.arity() {
        if xs.len() != n {
            return shape_err(format!("`{}` takes {n} inputs, got {}", op.kind(), xs.len()));
        }
    } else if xs.is_empty() {
        return shape_err(format!("`{}` needs at least one input", op.kind()));
    }
    match op {
        Op::Leaf => shape_err("leaf nodes are not computed"),
        Op::Add => binary(xs[0], xs[1], |a, b| a + b),
        Op::Sub => binary(xs[0], xs[1], |a, b| a - b),
        Op::Mul => binary(xs[0], xs[1], |a, b| a * b),
        Op::Div => binary(xs[0], xs[1], |a, b| a / b),
        Op::MatMul => matmul(xs[0], xs[1]),
        Op::Exp => unary(xs[0], |v| v.exp()),
        Op::Log => {
            if xs[0].data().iter().any(|v| *v <= T::zero()) {
                return Err(Error::NonFinite { op: "log".into() });
            }
            unary(xs[0], |v| v.ln())
        }
        Op::Softplus => unary(xs[0], softplus),
        Op::Sigmoid => unary(xs[0], sigmoid),
        Op::Silu => unary(xs[0], |v| v * sigmoid(v)),
        Op::Tanh => unary(xs[0], |v| v.tanh()),
        Op::Neg => unary(xs[0], |v| -v),
        Op::Scale(c) => {
            let c: T = cast(*c);
            unary(xs[0], |v| v * c)
        }
        Op::Softmax { axis } => softmax(xs[0], *axis, false),
        Op::LogSoftmax { axis } => softmax(xs[0], *axis, true),
        Op::Mean { axis } => reduce_axis(xs[0], *axis, true),
        Op::Sum { axis } => reduce_axis(xs[0], *axis, false),
        Op::SumAll => Ok(Tensor::scalar(xs[0].data().iter().copied().sum())),
        Op::Reshape { shape } => xs[0].clone().reshaped(shape.clone()),
        Op::Transpose { perm } => transpose(xs[0], perm),
        Op::Concat { axis } => concat(xs, *axis),
        Op::Narrow { axis, start, len } => narrow(xs[0], *axis, *start, *len),
        Op::Gather { axis, indices } => gather(xs[0], *axis, indices),
        Op::ScatterInverse { axis, indices } => scatter_inverse(xs[0], *axis, indices),
        Op::CausalConv1d => conv1d(xs[0], xs[1], xs[2]),
        Op::LayerNorm { eps } => layernorm(xs[0], xs[1], xs[2], *eps),
        Op::BroadcastTo { shape } => broadcast_to(xs[0], shape),
        Op::SelectiveScan { parallel } => {
            scan_kernel::forward(xs[0], xs[1], xs[2], xs[3], xs[4], *parallel)
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log1p(exp(-|x|)) + max(x, 0)`, finite for every finite input.
#[inline]
pub(crate) fn softplus<T: Element>(v: T) -> T {
    (-v.abs()).exp().ln_1p() + v.max(T::zero())
}

fn unary<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast2(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
    Tensor::new(out, data)
}

fn matmul<T: Element>(a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.ndim() != 2 {
        return shape_err(format!("matmul rhs must be 2-D, got {:?}", w.shape()));
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let last = *a.shape().last().unwrap();
    if last != k {
        return shape_err(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            w.shape()
        ));
    }
    let rows = a.numel() / k;
    let mut out = vec![T::zero(); rows * n];
    let (ad, wd) = (a.data(), w.data());
    for r in 0..rows {
        let orow = &mut out[r * n..(r + 1) * n];
        for (kk, &av) in ad[r * k..(r + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &wv) in orow.iter_mut().zip(&wd[kk * n..(kk + 1) * n]) {
                *o += av * wv;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

fn softmax<T: Element>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| o * n * inner + i * inner + j;
            let m = (0..n).map(|i| d[at(i)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..n).map(|i| (d[at(i)] - m).exp()).sum();
            let lz = z.ln();
            for i in 0..n {
                out[at(i)] = if log {
                    d[at(i)] - m - lz
                } else {
                    (d[at(i)] - m).exp() / z
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn reduce_axis<T: Element>(x: &Tensor<T>, axis: usize, mean: bool) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let src = &d[o * n * inner + i * inner..o * n * inner + (i + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    if mean {
        let scale = T::one() / cast::<T>(n as f64);
        out.iter_mut().for_each(|v| *v *= scale);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

fn transpose<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return shape_err(format!("invalid axis permutation {perm:?} for rank {nd}"));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; nd];
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for_each_broadcast2(&out_shape, &src_strides, &zero, |o, i, _| out[o] = d[i]);
    Tensor::new(out_shape, out)
}

fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs[0].shape();
    check_axis(first, axis)?;
    for x in xs {
        let s = x.shape();
        if s.len() != first.len()
            || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return shape_err(format!("concat shapes differ off-axis: {first:?} vs {s:?}"));
        }
    }
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut shape = first.to_vec();
    shape[axis] = total;
    let (outer, _, inner) = split_at_axis(first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis];
            out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    Tensor::new(shape, out)
}

fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    if len == 0 || start + len > n {
        return shape_err(format!(
            "narrow [{start}, {}) outside axis {axis} of {:?}",
            start + len,
            x.shape()
        ));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

fn gather<T: Element>(x: &Tensor<T>, axis: usize, idx: &[usize]) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    if idx.is_empty() {
        return shape_err("gather with empty index set");
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let m = idx.len();
    let mut out = Vec::with_capacity(outer * m * inner);
    let d = x.data();
    for o in 0..outer {
        for &i in idx {
            let base = o * n * inner + i * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = m;
    Tensor::new(shape, out)
}

pub(crate) fn check_permutation(idx: &[usize], n: usize) -> Result<()> {
    if idx.len() != n {
        return shape_err(format!(
            "scatter_inverse needs {n} indices, got {}",
            idx.len()
        ));
    }
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "scatter_inverse index {i} repeated; indices must be a permutation"
            )));
        }
    }
    Ok(())
}

fn scatter_inverse<T: Element>(x: &Tensor<T>, axis: usize, idx: &[usize]) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    check_permutation(idx, n)?;
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for o in 0..outer {
        for (i, &dst) in idx.iter().enumerate() {
            let s = o * n * inner + i * inner;
            let t = o * n * inner + dst * inner;
            out[t..t + inner].copy_from_slice(&d[s..s + inner]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn conv_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 3 || w.ndim() != 2 || b.ndim() != 1 {
        return shape_err(format!(
            "causal_conv1d expects x [B,L,C], w [C,K], b [C]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let (bs, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w.shape()[0] != c || b.shape()[0] != c {
        return shape_err(format!(
            "causal_conv1d channel mismatch: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    Ok((bs, l, c, w.shape()[1]))
}

fn conv1d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, l, c, k) = conv_dims(x, w, b)?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..bs {
        for t in 0..l {
            let orow = &mut out[(bi * l + t) * c..(bi * l + t + 1) * c];
            orow.copy_from_slice(bd);
            for j in 0..k {
                // tap j looks back k-1-j steps
                let back = k - 1 - j;
                if back > t {
                    continue;
                }
                let src = &xd[(bi * l + t - back) * c..(bi * l + t - back + 1) * c];
                for ch in 0..c {
                    orow[ch] += wd[ch * k + j] * src[ch];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn layernorm<T: Element>(x: &Tensor<T>, g: &Tensor<T>, b: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap();
    if g.shape() != [d] || b.shape() != [d] {
        return shape_err(format!(
            "layernorm over {d} features got gamma {:?}, beta {:?}",
            g.shape(),
            b.shape()
        ));
    }
    let eps: T = cast(eps);
    let rows = x.numel() / d;
    let mut out = vec![T::zero(); x.numel()];
    let nd: T = cast(d as f64);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / nd;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nd;
        let inv = T::one() / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mu) * inv * g.data()[i] + b.data()[i];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn broadcast_to<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shape(x.shape(), shape)?;
    if out != shape {
        return shape_err(format!("cannot broadcast {:?} to {shape:?}", x.shape()));
    }
    let sx = broadcast_strides(x.shape(), &out);
    let zero = vec![0; out.len()];
    let mut data = vec![T::zero(); out.iter().product()];
    let d = x.data();
    for_each_broadcast2(&out, &sx, &zero, |o, i, _| data[o] = d[i]);
    Tensor::new(out, data)
}

// ---------------------------------------------------------------------------
// backward

/// Vector-Jacobian product: gradients w.r.t. each input given the output
/// gradient `g`. `need[i]` marks the inputs whose gradient is wanted.
pub(crate) fn backward<T: Element>(
    op: &Op,
    xs: &[&Tensor<T>],
    y: &Tensor<T>,
    g: &[T],
    need: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let map1 = |f: &dyn Fn(usize) -> T| -> Vec<Option<Vec<T>>> {
        vec![Some((0..g.len()).map(f).collect())]
    };
    let x0 = xs.first().map(|x| x.data());
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add => binary_grad(xs[0], xs[1], y, g, need, |gi, _, _| (gi, gi)),
        Op::Sub => binary_grad(xs[0], xs[1], y, g, need, |gi, _, _| (gi, -gi)),
        Op::Mul => binary_grad(xs[0], xs[1], y, g, need, |gi, a, b| (gi * b, gi * a)),
        Op::Div => binary_grad(xs[0], xs[1], y, g, need, |gi, a, b| {
            (gi / b, -gi * a / (b * b))
        }),
        Op::MatMul => matmul_grad(xs[0], xs[1], g, need),
        Op::Exp => {
            let yd = y.data();
            map1(&|i| g[i] * yd[i])
        }
        Op::Log => {
            let d = x0.unwrap();
            map1(&|i| g[i] / d[i])
        }
        Op::Softplus => {
            let d = x0.unwrap();
            map1(&|i| g[i] * sigmoid(d[i]))
        }
        Op::Sigmoid => {
            let yd = y.data();
            map1(&|i| g[i] * yd[i] * (T::one() - yd[i]))
        }
        Op::Silu => {
            let d = x0.unwrap();
            map1(&|i| {
                let s = sigmoid(d[i]);
                g[i] * s * (T::one() + d[i] * (T::one() - s))
            })
        }
        Op::Tanh => {
            let yd = y.data();
            map1(&|i| g[i] * (T::one() - yd[i] * yd[i]))
        }
        Op::Neg => map1(&|i| -g[i]),
        Op::Scale(c) => {
            let c: T = cast(*c);
            map1(&|i| g[i] * c)
        }
        Op::Softmax { axis } => vec![Some(softmax_grad(y, g, *axis, false))],
        Op::LogSoftmax { axis } => vec![Some(softmax_grad(y, g, *axis, true))],
        Op::Mean { axis } | Op::Sum { axis } => {
            let (outer, n, inner) = split_at_axis(xs[0].shape(), *axis);
            let scale = if matches!(op, Op::Mean { .. }) {
                T::one() / cast::<T>(n as f64)
            } else {
                T::one()
            };
            let mut dx = vec![T::zero(); xs[0].numel()];
            for o in 0..outer {
                for i in 0..n {
                    for j in 0..inner {
                        dx[o * n * inner + i * inner + j] = g[o * inner + j] * scale;
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::SumAll => vec![Some(vec![g[0]; xs[0].numel()])],
        Op::Reshape { .. } => vec![Some(g.to_vec())],
        Op::Transpose { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gt = Tensor::new(y.shape().to_vec(), g.to_vec())?;
            vec![Some(transpose(&gt, &inv)?.into_data())]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_at_axis(y.shape(), *axis);
            let mut grads: Vec<Vec<T>> = xs.iter().map(|x| Vec::with_capacity(x.numel())).collect();
            for o in 0..outer {
                let mut off = 0;
                for (x, gx) in xs.iter().zip(grads.iter_mut()) {
                    let n = x.shape()[*axis];
                    let base = o * total * inner + off * inner;
                    gx.extend_from_slice(&g[base..base + n * inner]);
                    off += n;
                }
            }
            grads.into_iter().map(Some).collect()
        }
        Op::Narrow { axis, start, len } => {
            let (outer, n, inner) = split_at_axis(xs[0].shape(), *axis);
            let mut dx = vec![T::zero(); xs[0].numel()];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(dx)]
        }
        Op::Gather { axis, indices } => {
            let (outer, n, inner) = split_at_axis(xs[0].shape(), *axis);
            let m = indices.len();
            let mut dx = vec![T::zero(); xs[0].numel()];
            for o in 0..outer {
                for (i, &src) in indices.iter().enumerate() {
                    let gbase = o * m * inner + i * inner;
                    let xbase = o * n * inner + src * inner;
                    for j in 0..inner {
                        dx[xbase + j] += g[gbase + j];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::ScatterInverse { axis, indices } => {
            let gt = Tensor::new(y.shape().to_vec(), g.to_vec())?;
            vec![Some(gather(&gt, *axis, indices)?.into_data())]
        }
        Op::CausalConv1d => conv1d_grad(xs[0], xs[1], g, need)?,
        Op::LayerNorm { eps } => layernorm_grad(xs[0], xs[1], g, *eps, need),
        Op::BroadcastTo { .. } => {
            let sx = broadcast_strides(xs[0].shape(), y.shape());
            let zero = vec![0; y.ndim()];
            let mut dx = vec![T::zero(); xs[0].numel()];
            for_each_broadcast2(y.shape(), &sx, &zero, |o, i, _| dx[i] += g[o]);
            vec![Some(dx)]
        }
        Op::SelectiveScan { .. } => {
            let grads = scan_kernel::backward(xs[0], xs[1], xs[2], xs[3], xs[4], g)?;
            grads.into_iter().map(Some).collect()
        }
    })
}

fn binary_grad<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    y: &Tensor<T>,
    g: &[T],
    need: &[bool],
    f: impl Fn(T, T, T) -> (T, T),
) -> Vec<Option<Vec<T>>> {
    let mut ga = need[0].then(|| vec![T::zero(); a.numel()]);
    let mut gb = need[1].then(|| vec![T::zero(); b.numel()]);
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        for i in 0..g.len() {
            let (da, db) = f(g[i], ad[i], bd[i]);
            if let Some(v) = ga.as_mut() {
                v[i] = da;
            }
            if let Some(v) = gb.as_mut() {
                v[i] = db;
            }
        }
    } else {
        let out = y.shape();
        let sa = broadcast_strides(a.shape(), out);
        let sb = broadcast_strides(b.shape(), out);
        for_each_broadcast2(out, &sa, &sb, |o, i, j| {
            let (da, db) = f(g[o], ad[i], bd[j]);
            if let Some(v) = ga.as_mut() {
                v[i] += da;
            }
            if let Some(v) = gb.as_mut() {
                v[j] += db;
            }
        });
    }
    vec![ga, gb]
}

fn matmul_grad<T: Element>(a: &Tensor<T>, w: &Tensor<T>, g: &[T], need: &[bool]) -> Vec<Option<Vec<T>>> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let rows = a.numel() / k;
    let (ad, wd) = (a.data(), w.data());
    let ga = need[0].then(|| {
        let mut da = vec![T::zero(); a.numel()];
        for r in 0..rows {
            let grow = &g[r * n..(r + 1) * n];
            for kk in 0..k {
                let wrow = &wd[kk * n..(kk + 1) * n];
                da[r * k + kk] = grow.iter().zip(wrow).map(|(&x, &y)| x * y).sum();
            }
        }
        da
    });
    let gw = need[1].then(|| {
        let mut dw = vec![T::zero(); w.numel()];
        for r in 0..rows {
            let grow = &g[r * n..(r + 1) * n];
            for kk in 0..k {
                let av = ad[r * k + kk];
                if av == T::zero() {
                    continue;
                }
                for (o, &gv) in dw[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        dw
    });
    vec![ga, gw]
}

fn softmax_grad<T: Element>(y: &Tensor<T>, g: &[T], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(y.shape(), axis);
    let yd = y.data();
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| o * n * inner + i * inner + j;
            if log {
                let gs: T = (0..n).map(|i| g[at(i)]).sum();
                for i in 0..n {
                    dx[at(i)] = g[at(i)] - yd[at(i)].exp() * gs;
                }
            } else {
                let dot: T = (0..n).map(|i| g[at(i)] * yd[at(i)]).sum();
                for i in 0..n {
                    dx[at(i)] = yd[at(i)] * (g[at(i)] - dot);
                }
            }
        }
    }
    dx
}

fn conv1d_grad<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &[T], need: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
    let (bs, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut dx = need[0].then(|| vec![T::zero(); xd.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); wd.len()]);
    let mut db = need[2].then(|| vec![T::zero(); c]);
    for bi in 0..bs {
        for t in 0..l {
            let grow = &g[(bi * l + t) * c..(bi * l + t + 1) * c];
            if let Some(db) = db.as_mut() {
                for ch in 0..c {
                    db[ch] += grow[ch];
                }
            }
            for j in 0..k {
                let back = k - 1 - j;
                if back > t {
                    continue;
                }
                let src = (bi * l + t - back) * c;
                for ch in 0..c {
                    if let Some(dx) = dx.as_mut() {
                        dx[src + ch] += wd[ch * k + j] * grow[ch];
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[ch * k + j] += xd[src + ch] * grow[ch];
                    }
                }
            }
        }
    }
    Ok(vec![dx, dw, db])
}

fn layernorm_grad<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, g: &[T], eps: f64, need: &[bool]) -> Vec<Option<Vec<T>>> {
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let eps: T = cast(eps);
    let nd: T = cast(d as f64);
    let gd = gamma.data();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dg = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / nd;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nd;
        let inv = T::one() / (var + eps).sqrt();
        for i in 0..d {
            xhat[i] = (row[i] - mu) * inv;
            dxhat[i] = grow[i] * gd[i];
            dg[i] += grow[i] * xhat[i];
            dbeta[i] += grow[i];
        }
        let m1 = dxhat.iter().copied().sum::<T>() / nd;
        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nd;
        for i in 0..d {
            dx[r * d + i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    vec![need[0].then_some(dx), need[1].then_some(dg), need[2].then_some(dbeta)]
}
