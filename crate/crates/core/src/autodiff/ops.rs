//! Forward rules and vector-Jacobian products for every [`Primitive`].

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Primitive, Tensor};
use crate::{ctc, Error, Real, Result};

#[derive(Debug)]
pub(super) enum Saved {
    None,
    /// Max-pool winners: flat input index per output element.
    ArgMax(Vec<usize>),
    /// Channel-norm statistics.
    Norm { inv_std: Vec<Real> },
    /// Gradient of a scalar loss with respect to the single input.
    Grad(Vec<Real>),
}

pub(super) struct Forward {
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
    pub saved: Saved,
}

fn plain(shape: Vec<usize>, data: Vec<Real>) -> Result<Forward> {
    Ok(Forward {
        shape,
        data,
        saved: Saved::None,
    })
}

fn arity(prim: &Primitive, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{prim:?} takes {allowed:?} inputs, got {}",
            inputs.len()
        )))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "elementwise shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis < rank {
        Ok(())
    } else {
        Err(Error::InvalidAxis { axis, rank })
    }
}

/// (outer, len, inner) split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "window {kernel} (stride {stride}, pad {pad}) does not fit size {size}"
        )));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[Real], g: &ConvGeom, cols: &mut [Real]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        *o = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[Real], g: &ConvGeom, x_grad: &mut [Real]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut x_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(usize, usize, ConvGeom)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d takes N×C×H×W and O×C×KH×KW, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d weight expects {wc} input channels, input has {c}"
        )));
    }
    let oh = conv_out(h, kh, stride.0, pad.0)?;
    let ow = conv_out(wd, kw, stride.1, pad.1)?;
    Ok((
        n,
        o,
        ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        },
    ))
}

/// Calls `f(src_offset, dst_offset, run_len)` for each contiguous innermost
/// run of the sub-block `ranges` of a row-major array of `shape`.
fn for_each_run(shape: &[usize], ranges: &[std::ops::Range<usize>], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let run = ranges[rank - 1].len();
    let outer_dims: Vec<usize> = ranges[..rank - 1].iter().map(|r| r.len()).collect();
    let outer_total: usize = outer_dims.iter().product();
    let mut idx = vec![0usize; rank - 1];
    for k in 0..outer_total {
        let mut src = ranges[rank - 1].start;
        for d in 0..rank - 1 {
            src += (ranges[d].start + idx[d]) * strides[d];
        }
        f(src, k * run, run);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < outer_dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(super) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Forward> {
    use Primitive::*;
    match prim {
        Add | Mul => {
            arity(prim, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(a, b)?;
            let data = if matches!(prim, Add) {
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
            } else {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
            };
            plain(a.shape().to_vec(), data)
        }
        MatMul => {
            arity(prim, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(format!(
                    "matmul {:?} × {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            plain(vec![m, n], out)
        }
        Conv2d { stride, pad } => {
            arity(prim, inputs, &[2, 3])?;
            let (x, w) = (inputs[0], inputs[1]);
            let (n, o, g) = conv_geom(x, w, *stride, *pad)?;
            if let Some(b) = inputs.get(2) {
                if b.shape() != [o] {
                    return Err(Error::shape(format!(
                        "conv2d bias must be [{o}], got {:?}",
                        b.shape()
                    )));
                }
            }
            let p = g.positions();
            let ckk = g.cols_rows();
            let mut cols = vec![0.0; ckk * p];
            let mut out = vec![0.0; n * o * p];
            let in_plane = g.c * g.h * g.w;
            for ni in 0..n {
                im2col(&x.data()[ni * in_plane..(ni + 1) * in_plane], &g, &mut cols);
                let dst = &mut out[ni * o * p..(ni + 1) * o * p];
                if let Some(b) = inputs.get(2) {
                    for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.fill(b.data()[oc]);
                    }
                }
                gemm_nn(w.data(), &cols, dst, o, ckk, p);
            }
            plain(vec![n, o, g.oh, g.ow], out)
        }
        MaxPool2d {
            kernel,
            stride,
            pad,
        } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            if x.rank() != 4 {
                return Err(Error::shape(format!("maxpool2d takes rank 4, got {:?}", x.shape())));
            }
            if pad.0 >= kernel.0 || pad.1 >= kernel.1 {
                return Err(Error::shape("maxpool padding must be smaller than the kernel"));
            }
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let oh = conv_out(h, kernel.0, stride.0, pad.0)?;
            let ow = conv_out(w, kernel.1, stride.1, pad.1)?;
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut arg = Vec::with_capacity(n * c * oh * ow);
            let xd = x.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = Real::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ki in 0..kernel.0 {
                            let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..kernel.1 {
                                let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let idx = base + ii as usize * w + jj as usize;
                                // scan order is increasing flat index, so a
                                // strict comparison keeps the lowest on ties
                                if best_idx == usize::MAX || xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_idx);
                    }
                }
            }
            Ok(Forward {
                shape: vec![n, c, oh, ow],
                data: out,
                saved: Saved::ArgMax(arg),
            })
        }
        Relu | Sigmoid | Tanh => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            let f: fn(Real) -> Real = match prim {
                Relu => |v| if v > 0.0 { v } else { 0.0 },
                Sigmoid => sigmoid,
                _ => Real::tanh,
            };
            plain(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        }
        LogSoftmax { axis } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            check_axis(*axis, x.rank())?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len).map(|k| xd[at(k)]).fold(Real::NEG_INFINITY, Real::max);
                    let lse = max + (0..len).map(|k| (xd[at(k)] - max).exp()).sum::<Real>().ln();
                    for k in 0..len {
                        out[at(k)] = xd[at(k)] - lse;
                    }
                }
            }
            plain(x.shape().to_vec(), out)
        }
        Mean { axis } | Sum { axis } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            let is_mean = matches!(prim, Mean { .. });
            match axis {
                None => {
                    let s: Real = x.data().iter().sum();
                    let v = if is_mean { s / x.numel() as Real } else { s };
                    plain(vec![], vec![v])
                }
                Some(axis) => {
                    check_axis(*axis, x.rank())?;
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut out = vec![0.0; outer * inner];
                    let xd = x.data();
                    for o in 0..outer {
                        for k in 0..len {
                            let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
                            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    if is_mean {
                        let inv = 1.0 / len as Real;
                        out.iter_mut().for_each(|v| *v *= inv);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*axis);
                    plain(shape, out)
                }
            }
        }
        Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::shape("concat of zero tensors"));
            }
            let first = inputs[0];
            check_axis(*axis, first.rank())?;
            let mut total = 0;
            for t in inputs {
                if t.rank() != first.rank()
                    || t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .any(|(d, (a, b))| d != *axis && a != b)
                {
                    return Err(Error::shape(format!(
                        "concat along {axis}: {:?} vs {:?}",
                        t.shape(),
                        first.shape()
                    )));
                }
                total += t.shape()[*axis];
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            plain(shape, out)
        }
        Slice { ranges } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            if ranges.len() != x.rank()
                || ranges
                    .iter()
                    .zip(x.shape())
                    .any(|(r, &d)| r.start >= r.end || r.end > d)
            {
                return Err(Error::shape(format!(
                    "slice {ranges:?} of {:?}",
                    x.shape()
                )));
            }
            let shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
            let mut out = vec![0.0; shape.iter().product()];
            let xd = x.data();
            for_each_run(x.shape(), ranges, |src, dst, len| {
                out[dst..dst + len].copy_from_slice(&xd[src..src + len]);
            });
            plain(shape, out)
        }
        AffineChannel => {
            arity(prim, inputs, &[3])?;
            let (x, scale, shift) = (inputs[0], inputs[1], inputs[2]);
            let c = channel_dim(x)?;
            if scale.shape() != [c] || shift.shape() != [c] {
                return Err(Error::shape(format!(
                    "affine_channel needs [{c}] scale/shift, got {:?}/{:?}",
                    scale.shape(),
                    shift.shape()
                )));
            }
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = x.to_vec();
            for (blk, chunk) in out.chunks_mut(inner).enumerate() {
                let ch = blk % c;
                let (s, b) = (scale.data()[ch], shift.data()[ch]);
                chunk.iter_mut().for_each(|v| *v = *v * s + b);
            }
            plain(x.shape().to_vec(), out)
        }
        Dropout { rate } => {
            arity(prim, inputs, &[2])?;
            let (x, mask) = (inputs[0], inputs[1]);
            same_shape(x, mask)?;
            if !(0.0..1.0).contains(rate) {
                return Err(Error::shape(format!("dropout rate {rate} outside [0,1)")));
            }
            let s = 1.0 / (1.0 - rate);
            plain(
                x.shape().to_vec(),
                x.data().iter().zip(mask.data()).map(|(v, m)| v * m * s).collect(),
            )
        }
        Affine { mul, add } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            plain(x.shape().to_vec(), x.data().iter().map(|v| mul * v + add).collect())
        }
        Reshape { shape } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
                return Err(Error::shape(format!(
                    "cannot reshape {:?} to {shape:?}",
                    x.shape()
                )));
            }
            plain(shape.clone(), x.to_vec())
        }
        Transpose => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(Error::shape(format!("transpose takes rank 2, got {:?}", x.shape())));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            plain(vec![c, r], out)
        }
        AddBias => {
            arity(prim, inputs, &[2])?;
            let (x, b) = (inputs[0], inputs[1]);
            let n = x.shape().last().copied().unwrap_or(0);
            if x.rank() == 0 || b.shape() != [n] {
                return Err(Error::shape(format!(
                    "add_bias {:?} + {:?}",
                    x.shape(),
                    b.shape()
                )));
            }
            let mut out = x.to_vec();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
            }
            plain(x.shape().to_vec(), out)
        }
        ChannelNorm { eps } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            let c = channel_dim(x)?;
            let inner: usize = x.shape()[2..].iter().product();
            let (mean, var) = channel_stats(x.data(), c, inner);
            let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = x.to_vec();
            for (blk, chunk) in out.chunks_mut(inner).enumerate() {
                let ch = blk % c;
                chunk
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
            }
            Ok(Forward {
                shape: x.shape().to_vec(),
                data: out,
                saved: Saved::Norm { inv_std },
            })
        }
        CtcLoss { labels } => {
            arity(prim, inputs, &[1])?;
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(Error::shape(format!("ctc lattice must be rank 2, got {:?}", x.shape())));
            }
            let (t, classes) = (x.shape()[0], x.shape()[1]);
            let (loss, grad) = ctc::loss_and_grad_raw(x.data(), t, classes, labels)?;
            Ok(Forward {
                shape: vec![],
                data: vec![loss],
                saved: Saved::Grad(grad),
            })
        }
    }
}

fn channel_dim(x: &Tensor) -> Result<usize> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "channel ops need N×C×…, got {:?}",
            x.shape()
        )));
    }
    Ok(x.shape()[1])
}

/// Per-channel mean and biased variance of an `N×C×inner` buffer.
pub(crate) fn channel_stats(x: &[Real], c: usize, inner: usize) -> (Vec<Real>, Vec<Real>) {
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let blocks = x.len() / inner;
    let count = (blocks / c * inner) as Real;
    for (blk, chunk) in x.chunks(inner).enumerate() {
        mean[blk % c] += chunk.iter().sum::<Real>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (blk, chunk) in x.chunks(inner).enumerate() {
        let m = mean[blk % c];
        sq[blk % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<Real>();
    }
    sq.iter_mut().for_each(|s| *s /= count);
    (mean, sq)
}

pub(super) fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Accumulates into `gin` the gradient flowing to input `which`.
#[allow(clippy::too_many_arguments)]
pub(super) fn vjp(
    prim: &Primitive,
    inputs: &[&Tensor],
    out: &[Real],
    out_shape: &[usize],
    saved: &Saved,
    gout: &[Real],
    which: usize,
    gin: &mut [Real],
) {
    use Primitive::*;
    match prim {
        Add => gin.iter_mut().zip(gout).for_each(|(a, g)| *a += g),
        Mul => {
            let other = inputs[1 - which].data();
            gin.iter_mut()
                .zip(gout.iter().zip(other))
                .for_each(|(a, (g, o))| *a += g * o);
        }
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if which == 0 {
                // dA = G · Bᵀ
                gemm_nt(gout, b.data(), gin, m, n, k);
            } else {
                // dB = Aᵀ · G
                gemm_tn(a.data(), gout, gin, k, m, n);
            }
        }
        Conv2d { stride, pad } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, o, g) = conv_geom(x, w, *stride, *pad).expect("validated in forward");
            let p = g.positions();
            let ckk = g.cols_rows();
            let in_plane = g.c * g.h * g.w;
            match which {
                0 => {
                    let mut dcols = vec![0.0; ckk * p];
                    for ni in 0..n {
                        dcols.fill(0.0);
                        gemm_tn(w.data(), &gout[ni * o * p..(ni + 1) * o * p], &mut dcols, ckk, o, p);
                        col2im_add(&dcols, &g, &mut gin[ni * in_plane..(ni + 1) * in_plane]);
                    }
                }
                1 => {
                    let mut cols = vec![0.0; ckk * p];
                    for ni in 0..n {
                        im2col(&x.data()[ni * in_plane..(ni + 1) * in_plane], &g, &mut cols);
                        gemm_nt(&gout[ni * o * p..(ni + 1) * o * p], &cols, gin, o, p, ckk);
                    }
                }
                _ => {
                    for (blk, chunk) in gout.chunks(p).enumerate() {
                        gin[blk % o] += chunk.iter().sum::<Real>();
                    }
                }
            }
        }
        MaxPool2d { .. } => {
            let Saved::ArgMax(arg) = saved else {
                unreachable!("maxpool saves argmax")
            };
            for (&idx, g) in arg.iter().zip(gout) {
                gin[idx] += g;
            }
        }
        Relu => {
            let x = inputs[0].data();
            for ((a, g), v) in gin.iter_mut().zip(gout).zip(x) {
                if *v > 0.0 {
                    *a += g;
                }
            }
        }
        Sigmoid => {
            for ((a, g), y) in gin.iter_mut().zip(gout).zip(out) {
                *a += g * y * (1.0 - y);
            }
        }
        Tanh => {
            for ((a, g), y) in gin.iter_mut().zip(gout).zip(out) {
                *a += g * (1.0 - y * y);
            }
        }
        LogSoftmax { axis } => {
            let (outer, len, inner) = split_axis(out_shape, *axis);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let gsum: Real = (0..len).map(|k| gout[at(k)]).sum();
                    for k in 0..len {
                        gin[at(k)] += gout[at(k)] - out[at(k)].exp() * gsum;
                    }
                }
            }
        }
        Mean { axis } | Sum { axis } => {
            let x = inputs[0];
            let is_mean = matches!(prim, Mean { .. });
            match axis {
                None => {
                    let g = if is_mean {
                        gout[0] / x.numel() as Real
                    } else {
                        gout[0]
                    };
                    gin.iter_mut().for_each(|a| *a += g);
                }
                Some(axis) => {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let scale = if is_mean { 1.0 / len as Real } else { 1.0 };
                    for o in 0..outer {
                        let src = &gout[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let dst = &mut gin[(o * len + k) * inner..(o * len + k + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(a, g)| *a += g * scale);
                        }
                    }
                }
            }
        }
        Concat { axis } => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let offset: usize = inputs[..which].iter().map(|t| t.shape()[*axis]).sum();
            let len = inputs[which].shape()[*axis];
            for o in 0..outer {
                let src = &gout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                let dst = &mut gin[o * len * inner..(o + 1) * len * inner];
                dst.iter_mut().zip(src).for_each(|(a, g)| *a += g);
            }
        }
        Slice { ranges } => {
            for_each_run(inputs[0].shape(), ranges, |src, dst, len| {
                gin[src..src + len]
                    .iter_mut()
                    .zip(&gout[dst..dst + len])
                    .for_each(|(a, g)| *a += g);
            });
        }
        AffineChannel => {
            let x = inputs[0];
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let (scale, _) = (inputs[1].data(), inputs[2].data());
            match which {
                0 => {
                    for (blk, (a, g)) in gin.chunks_mut(inner).zip(gout.chunks(inner)).enumerate() {
                        let s = scale[blk % c];
                        a.iter_mut().zip(g).for_each(|(a, g)| *a += g * s);
                    }
                }
                1 => {
                    for (blk, (xs, g)) in x.data().chunks(inner).zip(gout.chunks(inner)).enumerate() {
                        gin[blk % c] += xs.iter().zip(g).map(|(x, g)| x * g).sum::<Real>();
                    }
                }
                _ => {
                    for (blk, g) in gout.chunks(inner).enumerate() {
                        gin[blk % c] += g.iter().sum::<Real>();
                    }
                }
            }
        }
        Dropout { rate } => {
            let s = 1.0 / (1.0 - rate);
            let other = inputs[1 - which].data();
            gin.iter_mut()
                .zip(gout.iter().zip(other))
                .for_each(|(a, (g, o))| *a += g * o * s);
        }
        Affine { mul, .. } => gin.iter_mut().zip(gout).for_each(|(a, g)| *a += g * mul),
        Reshape { .. } => gin.iter_mut().zip(gout).for_each(|(a, g)| *a += g),
        Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            for i in 0..r {
                for j in 0..c {
                    gin[i * c + j] += gout[j * r + i];
                }
            }
        }
        AddBias => {
            if which == 0 {
                gin.iter_mut().zip(gout).for_each(|(a, g)| *a += g);
            } else {
                let n = gin.len();
                for row in gout.chunks(n) {
                    gin.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
            }
        }
        ChannelNorm { .. } => {
            let Saved::Norm { inv_std } = saved else {
                unreachable!("channel norm saves statistics")
            };
            let c = out_shape[1];
            let inner: usize = out_shape[2..].iter().product();
            let count = (out.len() / c) as Real;
            let mut sum_g = vec![0.0; c];
            let mut sum_gy = vec![0.0; c];
            for (blk, (g, y)) in gout.chunks(inner).zip(out.chunks(inner)).enumerate() {
                sum_g[blk % c] += g.iter().sum::<Real>();
                sum_gy[blk % c] += g.iter().zip(y).map(|(g, y)| g * y).sum::<Real>();
            }
            for (blk, ((a, g), y)) in gin
                .chunks_mut(inner)
                .zip(gout.chunks(inner))
                .zip(out.chunks(inner))
                .enumerate()
            {
                let ch = blk % c;
                let k = inv_std[ch] / count;
                for ((a, g), y) in a.iter_mut().zip(g).zip(y) {
                    *a += k * (count * g - sum_g[ch] - y * sum_gy[ch]);
                }
            }
        }
        CtcLoss { .. } => {
            let Saved::Grad(grad) = saved else {
                unreachable!("ctc saves its gradient")
            };
            let g = gout[0];
            gin.iter_mut().zip(grad).for_each(|(a, d)| *a += g * d);
        }
    }
}
