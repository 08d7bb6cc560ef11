use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{shape_err, Result, Tensor};

pub(crate) const LN_EPS: f32 = 1e-6;

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `trans_a`, `a` is stored row-major as `k × m`; with `trans_b`, `b`
/// is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return x.clone();
    }
    // innermost axis runs as a strided copy
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let data = x.data();
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis, inner) extents around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.dim(axis) {
        return Err(shape_err(
            "slice",
            format!("{}..{} on axis {} of {:?}", start, start + len, axis, x.shape()),
        ));
    }
    let (outer, size, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * size * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Adds `g` (shaped like the slice) into `dst` at `start` along `axis`.
pub(crate) fn slice_accumulate(dst: &mut Tensor, g: &Tensor, axis: usize, start: usize) {
    let (outer, size, inner) = split_at_axis(dst.shape(), axis);
    let len = g.dim(axis);
    let gd = g.data();
    let dd = dst.data_mut();
    for o in 0..outer {
        let base = o * size * inner + start * inner;
        let src = &gd[o * len * inner..(o + 1) * len * inner];
        for (d, s) in dd[base..base + len * inner].iter_mut().zip(src) {
            *d += s;
        }
    }
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat", format!("no inputs")))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(shape_err("concat", format!("axis {} for rank {}", axis, rank)));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err(
                "concat",
                format!("{:?} vs {:?} on axis {}", p.shape(), first.shape(), axis),
            ));
        }
        total += p.dim(axis);
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub(crate) fn softmax_rows(data: &mut [f32], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = libm::expf(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Normalizes each row; returns per-row inverse standard deviations.
pub(crate) fn layer_norm_rows(x: &[f32], width: usize, out: &mut [f32]) -> Vec<f32> {
    let mut inv_stds = Vec::with_capacity(x.len() / width.max(1));
    for (row, orow) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / width as f64;
        let inv = 1.0 / libm::sqrt(var + LN_EPS as f64);
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
        inv_stds.push(inv as f32);
    }
    inv_stds
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + libm::tanhf(u))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = libm::tanhf(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

/// Rotates consecutive pairs `(2i, 2i+1)` of the last axis of a
/// `[batch, positions, heads, head_dim]` tensor by `angle[pos][i]`.
/// `sign = -1` applies the inverse rotation.
pub(crate) fn rope_apply(
    x: &[f32],
    shape: &[usize],
    cos: &[f32],
    sin: &[f32],
    sign: f32,
    out: &mut [f32],
) {
    let (batch, positions, heads, hd) = (shape[0], shape[1], shape[2], shape[3]);
    let half = hd / 2;
    for b in 0..batch {
        for p in 0..positions {
            let c = &cos[p * half..(p + 1) * half];
            let s = &sin[p * half..(p + 1) * half];
            for h in 0..heads {
                let base = ((b * positions + p) * heads + h) * hd;
                for i in 0..half {
                    let x0 = x[base + 2 * i];
                    let x1 = x[base + 2 * i + 1];
                    let si = sign * s[i];
                    out[base + 2 * i] = x0 * c[i] - x1 * si;
                    out[base + 2 * i + 1] = x0 * si + x1 * c[i];
                }
            }
        }
    }
}
