//! Forward and vector-Jacobian rules for every differentiable operation.

use super::tensor::{broadcast_offsets, broadcast_shape, gemm_acc, split_axis, strides, transpose2, Tensor};
use crate::error::{Error, Result};

/// Epsilon used by [`Op::LayerNorm`] unless stated otherwise.
pub const LAYER_NORM_EPS: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// A differentiable tensor operation.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    /// `[.., n, k] x [k, m]` or batched `[.., n, k] x [.., k, m]`.
    MatMul,
    /// Swap the two trailing axes.
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    /// Gather rows along axis 0; indices may repeat.
    IndexSelect(Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumAll,
    MeanAll,
    Softmax(usize),
    LogSoftmax(usize),
    /// Normalisation without affine parameters.
    LayerNorm { axis: usize, eps: f64 },
    Gelu,
    Sin,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Softplus,
    L2Norm(usize),
    CosineSimilarity(usize),
    /// Inputs `[x (.., C_in), pad (scalar)]`; `present[j]` is the output
    /// channel of input channel `j`, all other channels take `pad`.
    PadChannels { present: Vec<usize>, expected: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Permute(_) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::IndexSelect(_) => "index_select",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Sin => "sin",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::L2Norm(_) => "l2_norm",
            Op::CosineSimilarity(_) => "cosine_similarity",
            Op::PadChannels { .. } => "pad_channels",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::CosineSimilarity(_) | Op::PadChannels { .. } => {
                Some(2)
            }
            Op::Concat(_) => None,
            _ => Some(1),
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, &[a.shape(), b.shape()]))?;
    let oa = broadcast_offsets(a.shape(), &out);
    let ob = broadcast_offsets(b.shape(), &out);
    let (ad, bd) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::new(out, data)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let off = broadcast_offsets(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (&o, &v) in off.iter().zip(g.data()) {
        od[o] += v;
    }
    out
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_stride: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let xd = x.data();
    for _ in 0..n {
        data.push(xd[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_stride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute preserves numel")
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    let err = || Error::shape("matmul", &[ash, bsh]);
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(err());
    }
    let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, m) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch_a = &ash[..ash.len() - 2];
    let mut out_shape = batch_a.to_vec();
    out_shape.extend([n, m]);
    let mut out = vec![0.0; out_shape.iter().product()];
    if bsh.len() == 2 {
        let rows: usize = batch_a.iter().product::<usize>() * n;
        gemm_acc(a.data(), b.data(), &mut out, rows, k, m);
    } else {
        if &bsh[..bsh.len() - 2] != batch_a {
            return Err(err());
        }
        let nb: usize = batch_a.iter().product();
        for i in 0..nb {
            gemm_acc(
                &a.data()[i * n * k..(i + 1) * n * k],
                &b.data()[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
    }
    Tensor::new(out_shape, out)
}

fn matmul_bwd(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (ash, bsh) = (a.shape(), b.shape());
    let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let m = bsh[bsh.len() - 1];
    let nb: usize = ash[..ash.len() - 2].iter().product();
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    if bsh.len() == 2 {
        let rows = nb * n;
        let bt = transpose2(b.data(), k, m);
        gemm_acc(g.data(), &bt, &mut ga, rows, m, k);
        let at = transpose2(a.data(), rows, k);
        gemm_acc(&at, g.data(), &mut gb, k, rows, m);
    } else {
        for i in 0..nb {
            let ab = &a.data()[i * n * k..(i + 1) * n * k];
            let bb = &b.data()[i * k * m..(i + 1) * k * m];
            let gg = &g.data()[i * n * m..(i + 1) * n * m];
            let bt = transpose2(bb, k, m);
            gemm_acc(gg, &bt, &mut ga[i * n * k..(i + 1) * n * k], n, m, k);
            let at = transpose2(ab, n, k);
            gemm_acc(&at, gg, &mut gb[i * k * m..(i + 1) * k * m], k, n, m);
        }
    }
    (
        Tensor::new(ash.to_vec(), ga).expect("shape"),
        Tensor::new(bsh.to_vec(), gb).expect("shape"),
    )
}

fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::shape("transpose", &[x.shape()]));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    Ok(permute_tensor(x, &axes))
}

/// Applies `f` to each lane along `axis`, writing a lane of the same length.
fn map_lanes(x: &Tensor, axis: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let mut lane = vec![0.0; len];
    let mut res = vec![0.0; len];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                lane[j] = xd[base + j * inner];
            }
            f(&lane, &mut res);
            let od = out.data_mut();
            for j in 0..len {
                od[base + j * inner] = res[j];
            }
        }
    }
    out
}

/// Like [`map_lanes`] for two tensors of identical shape.
fn map_lanes2(x: &Tensor, y: &Tensor, axis: usize, mut f: impl FnMut(&[f64], &[f64], &mut [f64])) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let (mut lx, mut ly, mut res) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                lx[j] = x.data()[base + j * inner];
                ly[j] = y.data()[base + j * inner];
            }
            f(&lx, &ly, &mut res);
            let od = out.data_mut();
            for j in 0..len {
                od[base + j * inner] = res[j];
            }
        }
    }
    out
}

/// Reduces lanes along `axis` to one value each.
fn reduce_lanes(x: &Tensor, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * inner);
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                lane[j] = x.data()[base + j * inner];
            }
            data.push(f(&lane));
        }
    }
    Tensor::new(without_axis(x.shape(), axis), data).expect("shape")
}

/// Broadcasts a reduced tensor back along `axis` of `shape`, lane by lane.
fn expand_lanes(r: &Tensor, shape: &[usize], axis: usize, f: impl Fn(f64, usize) -> f64) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let v = r.data()[o * inner + i];
            let base = o * len * inner + i;
            for j in 0..len {
                od[base + j * inner] = f(v, base + j * inner);
            }
        }
    }
    out
}

fn softmax_lane(x: &[f64], y: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in y.iter_mut().zip(x) {
        *o = (v - mx).exp();
        s += *o;
    }
    for o in y.iter_mut() {
        *o /= s;
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Evaluates `op` on `inputs` without recording anything.
pub fn eval_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
            return Err(Error::shape(op.name(), &shapes));
        }
    }
    let x = inputs.first().copied().ok_or_else(|| Error::shape(op.name(), &[]))?;
    Ok(match op {
        Op::Add => binary("add", x, inputs[1], |a, b| a + b)?,
        Op::Sub => binary("sub", x, inputs[1], |a, b| a - b)?,
        Op::Mul => binary("mul", x, inputs[1], |a, b| a * b)?,
        Op::Div => binary("div", x, inputs[1], |a, b| a / b)?,
        Op::Scale(c) => unary(x, |v| v * c),
        Op::AddScalar(c) => unary(x, |v| v + c),
        Op::MatMul => matmul_fwd(x, inputs[1])?,
        Op::Transpose => transpose_last(x)?,
        Op::Permute(axes) => {
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::shape("permute", &[x.shape(), axes]));
            }
            permute_tensor(x, axes)
        }
        Op::Reshape(shape) => x.clone().reshaped(shape)?,
        Op::Concat(axis) => {
            let axis = *axis;
            check_axis("concat", axis, x.rank())?;
            for t in inputs {
                let ok = t.rank() == x.rank()
                    && t.shape().iter().zip(x.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
                    return Err(Error::shape("concat", &shapes));
                }
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let w = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::new(shape, data)?
        }
        Op::Slice { axis, start, end } => {
            check_axis("slice", *axis, x.rank())?;
            if start >= end || *end > x.shape()[*axis] {
                return Err(Error::shape("slice", &[x.shape(), &[*start, *end]]));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            Tensor::new(shape, data)?
        }
        Op::IndexSelect(idx) => {
            if x.rank() == 0 || idx.iter().any(|&i| i >= x.shape()[0]) {
                return Err(Error::shape("index_select", &[x.shape(), idx]));
            }
            let w = x.numel() / x.shape()[0];
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, data)?
        }
        Op::Sum(axis) => {
            check_axis("sum", *axis, x.rank())?;
            reduce_lanes(x, *axis, |l| l.iter().sum())
        }
        Op::Mean(axis) => {
            check_axis("mean", *axis, x.rank())?;
            reduce_lanes(x, *axis, |l| l.iter().sum::<f64>() / l.len() as f64)
        }
        Op::SumAll => Tensor::scalar(x.data().iter().sum()),
        Op::MeanAll => Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64),
        Op::Softmax(axis) => {
            check_axis("softmax", *axis, x.rank())?;
            map_lanes(x, *axis, softmax_lane)
        }
        Op::LogSoftmax(axis) => {
            check_axis("log_softmax", *axis, x.rank())?;
            map_lanes(x, *axis, |l, o| {
                let lse = log_sum_exp(l);
                for (r, &v) in o.iter_mut().zip(l) {
                    *r = v - lse;
                }
            })
        }
        Op::LayerNorm { axis, eps } => {
            check_axis("layer_norm", *axis, x.rank())?;
            map_lanes(x, *axis, |l, o| {
                let n = l.len() as f64;
                let mu = l.iter().sum::<f64>() / n;
                let var = l.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for (r, &v) in o.iter_mut().zip(l) {
                    *r = (v - mu) * inv;
                }
            })
        }
        Op::Gelu => unary(x, gelu),
        Op::Sin => unary(x, f64::sin),
        Op::Exp => unary(x, f64::exp),
        Op::Log => unary(x, f64::ln),
        Op::Sqrt => unary(x, f64::sqrt),
        Op::Sigmoid => unary(x, sigmoid),
        Op::Softplus => unary(x, softplus),
        Op::L2Norm(axis) => {
            check_axis("l2_norm", *axis, x.rank())?;
            reduce_lanes(x, *axis, |l| l.iter().map(|v| v * v).sum::<f64>().sqrt())
        }
        Op::CosineSimilarity(axis) => {
            let y = inputs[1];
            if x.shape() != y.shape() {
                return Err(Error::shape("cosine_similarity", &[x.shape(), y.shape()]));
            }
            check_axis("cosine_similarity", *axis, x.rank())?;
            let prod = binary("mul", x, y, |a, b| a * b)?;
            let dot = reduce_lanes(&prod, *axis, |l| l.iter().sum());
            let nx = reduce_lanes(x, *axis, |l| l.iter().map(|v| v * v).sum::<f64>().sqrt());
            let ny = reduce_lanes(y, *axis, |l| l.iter().map(|v| v * v).sum::<f64>().sqrt());
            let data = dot.data().iter().zip(nx.data()).zip(ny.data()).map(|((d, a), b)| d / (a * b)).collect();
            Tensor::new(dot.shape().to_vec(), data)?
        }
        Op::PadChannels { present, expected } => {
            let pad = inputs[1];
            let c_in = *x.shape().last().unwrap_or(&0);
            if c_in > *expected {
                return Err(Error::TooManyChannels { have: c_in, expected: *expected });
            }
            if pad.numel() != 1 || present.len() != c_in || present.iter().any(|&c| c >= *expected) {
                return Err(Error::shape("pad_channels", &[x.shape(), pad.shape(), present]));
            }
            let rows = x.numel() / c_in.max(1);
            let mut data = vec![pad.item(); rows * expected];
            for r in 0..rows {
                for (j, &c) in present.iter().enumerate() {
                    data[r * expected + c] = x.data()[r * c_in + j];
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = *expected;
            Tensor::new(shape, data)?
        }
    })
}

/// Vector-Jacobian product: gradients w.r.t. each input given the upstream
/// gradient `g` of the output `y`.
pub(crate) fn vjp(op: &Op, inputs: &[&Tensor], y: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let x = inputs[0];
    match op {
        Op::Add => vec![reduce_to(g, x.shape()), reduce_to(g, inputs[1].shape())],
        Op::Sub => vec![reduce_to(g, x.shape()), reduce_to(&g.map(|v| -v), inputs[1].shape())],
        Op::Mul | Op::Div => {
            let b = inputs[1];
            let oa = broadcast_offsets(x.shape(), g.shape());
            let ob = broadcast_offsets(b.shape(), g.shape());
            let mut ga = Tensor::zeros(x.shape());
            let mut gb = Tensor::zeros(b.shape());
            for (k, &gv) in g.data().iter().enumerate() {
                let (av, bv) = (x.data()[oa[k]], b.data()[ob[k]]);
                if *op == Op::Mul {
                    ga.data_mut()[oa[k]] += gv * bv;
                    gb.data_mut()[ob[k]] += gv * av;
                } else {
                    ga.data_mut()[oa[k]] += gv / bv;
                    gb.data_mut()[ob[k]] -= gv * av / (bv * bv);
                }
            }
            vec![ga, gb]
        }
        Op::Scale(c) => vec![g.map(|v| v * c)],
        Op::AddScalar(_) => vec![g.clone()],
        Op::MatMul => {
            let (ga, gb) = matmul_bwd(x, inputs[1], g);
            vec![ga, gb]
        }
        Op::Transpose => vec![transpose_last(g).expect("rank checked in forward")],
        Op::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            vec![permute_tensor(g, &inv)]
        }
        Op::Reshape(_) => vec![g.clone().reshaped(x.shape()).expect("same numel")],
        Op::Concat(axis) => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let len = t.shape()[*axis];
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total * inner;
                        data.extend_from_slice(&g.data()[base + offset * inner..base + (offset + len) * inner]);
                    }
                    offset += len;
                    Tensor::new(t.shape().to_vec(), data).expect("shape")
                })
                .collect()
        }
        Op::Slice { axis, start, end } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let w = (end - start) * inner;
            let mut gx = Tensor::zeros(x.shape());
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                gx.data_mut()[base..base + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            vec![gx]
        }
        Op::IndexSelect(idx) => {
            let w = x.numel() / x.shape()[0];
            let mut gx = Tensor::zeros(x.shape());
            for (r, &i) in idx.iter().enumerate() {
                let dst = &mut gx.data_mut()[i * w..(i + 1) * w];
                for (d, s) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                    *d += s;
                }
            }
            vec![gx]
        }
        Op::Sum(axis) => vec![expand_lanes(g, x.shape(), *axis, |v, _| v)],
        Op::Mean(axis) => {
            let n = x.shape()[*axis] as f64;
            vec![expand_lanes(g, x.shape(), *axis, |v, _| v / n)]
        }
        Op::SumAll => vec![Tensor::full(x.shape(), g.item())],
        Op::MeanAll => vec![Tensor::full(x.shape(), g.item() / x.numel() as f64)],
        Op::Softmax(axis) => vec![map_lanes2(y, g, *axis, |yl, gl, o| {
            let dot: f64 = yl.iter().zip(gl).map(|(a, b)| a * b).sum();
            for ((r, &yv), &gv) in o.iter_mut().zip(yl).zip(gl) {
                *r = yv * (gv - dot);
            }
        })],
        Op::LogSoftmax(axis) => vec![map_lanes2(y, g, *axis, |yl, gl, o| {
            let gs: f64 = gl.iter().sum();
            for ((r, &yv), &gv) in o.iter_mut().zip(yl).zip(gl) {
                *r = gv - yv.exp() * gs;
            }
        })],
        Op::LayerNorm { axis, eps } => {
            let xy = map_lanes2(x, g, *axis, |xl, gl, o| {
                let n = xl.len() as f64;
                let mu = xl.iter().sum::<f64>() / n;
                let var = xl.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let gm = gl.iter().sum::<f64>() / n;
                let gym = xl.iter().zip(gl).map(|(v, gv)| (v - mu) * inv * gv).sum::<f64>() / n;
                for ((r, &v), &gv) in o.iter_mut().zip(xl).zip(gl) {
                    *r = inv * (gv - gm - (v - mu) * inv * gym);
                }
            });
            vec![xy]
        }
        Op::Gelu => vec![binary("gelu", x, g, |v, gv| gv * gelu_grad(v)).expect("same shape")],
        Op::Sin => vec![binary("sin", x, g, |v, gv| gv * v.cos()).expect("same shape")],
        Op::Exp => vec![binary("exp", y, g, |v, gv| gv * v).expect("same shape")],
        Op::Log => vec![binary("log", x, g, |v, gv| gv / v).expect("same shape")],
        Op::Sqrt => vec![binary("sqrt", y, g, |v, gv| gv / (2.0 * v)).expect("same shape")],
        Op::Sigmoid => vec![binary("sigmoid", y, g, |v, gv| gv * v * (1.0 - v)).expect("same shape")],
        Op::Softplus => vec![binary("softplus", x, g, |v, gv| gv * sigmoid(v)).expect("same shape")],
        Op::L2Norm(axis) => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gx = Tensor::zeros(x.shape());
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    let n = y.data()[r];
                    if n == 0.0 {
                        continue;
                    }
                    for j in 0..len {
                        let k = o * len * inner + j * inner + i;
                        gx.data_mut()[k] = g.data()[r] * x.data()[k] / n;
                    }
                }
            }
            vec![gx]
        }
        Op::CosineSimilarity(axis) => {
            let b = inputs[1];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut ga = Tensor::zeros(x.shape());
            let mut gb = Tensor::zeros(b.shape());
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let (mut na, mut nb) = (0.0, 0.0);
                    for j in 0..len {
                        na += x.data()[at(j)].powi(2);
                        nb += b.data()[at(j)].powi(2);
                    }
                    let (na, nb) = (na.sqrt(), nb.sqrt());
                    let c = y.data()[r];
                    let gv = g.data()[r];
                    for j in 0..len {
                        let (av, bv) = (x.data()[at(j)], b.data()[at(j)]);
                        ga.data_mut()[at(j)] = gv * (bv / (na * nb) - c * av / (na * na));
                        gb.data_mut()[at(j)] = gv * (av / (na * nb) - c * bv / (nb * nb));
                    }
                }
            }
            vec![ga, gb]
        }
        Op::PadChannels { present, expected } => {
            let c_in = present.len();
            let rows = g.numel() / expected;
            let mut gx = Tensor::zeros(x.shape());
            let mut is_present = vec![false; *expected];
            for &c in present {
                is_present[c] = true;
            }
            let mut gpad = 0.0;
            for r in 0..rows {
                for (j, &c) in present.iter().enumerate() {
                    gx.data_mut()[r * c_in + j] = g.data()[r * expected + c];
                }
                for (c, &p) in is_present.iter().enumerate() {
                    if !p {
                        gpad += g.data()[r * expected + c];
                    }
                }
            }
            vec![gx, Tensor::full(inputs[1].shape(), gpad)]
        }
    }
}
