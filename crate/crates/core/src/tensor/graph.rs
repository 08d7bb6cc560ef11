use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { x: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBcast { x: Var, v: Var },
    MulBcast { x: Var, v: Var },
    Scale { x: Var, c: f32 },
    AddScalar { x: Var },
    Mean { x: Var, axis: usize },
    MeanAll { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, inv_std: Vec<f32> },
    Gelu { x: Var },
    Silu { x: Var },
    Exp { x: Var },
    Expand { x: Var },
    Rope { x: Var, cos: Vec<f32>, sin: Vec<f32> },
    AssignFrames { x: Var, src: Var, h: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBcast { .. } => "add_bcast",
            Op::MulBcast { .. } => "mul_bcast",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Mean { .. } => "mean",
            Op::MeanAll { .. } => "mean_all",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Silu { .. } => "silu",
            Op::Exp { .. } => "exp",
            Op::Expand { .. } => "expand",
            Op::Rope { .. } => "rope",
            Op::AssignFrames { .. } => "assign_frames",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward evaluation.
///
/// Values are computed eagerly as ops are appended; [`Graph::backward`]
/// walks the record in reverse to propagate cotangents from a scalar.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    failure: Option<&'static str>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Cotangents produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn bcast_ok(x: &Tensor, v: &Tensor) -> bool {
    if v.len() == 1 {
        return true;
    }
    let (xs, vs) = (x.shape(), v.shape());
    vs.len() <= xs.len() && xs[xs.len() - vs.len()..] == *vs
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            failure: None,
        }
    }

    /// Records the first op that produces a non-finite value; see [`Graph::check`].
    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn check(&self) -> Result<()> {
        match self.failure {
            Some(op) => Err(TensorError::NumericalFailure { op }),
            None => Ok(()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.check_finite && self.failure.is_none() && !value.is_finite() {
            self.failure = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w` over the last axis of `x`; `w` is `k × m`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = *xv.shape().last().unwrap_or(&0);
        if wv.rank() != 2 || xv.rank() == 0 || wv.dim(0) != k {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", xv.shape(), wv.shape()),
            ));
        }
        let m = wv.dim(1);
        let rows = xv.len() / k.max(1);
        let mut out = vec![0.0; rows * m];
        kernels::gemm(rows, k, m, xv.data(), false, wv.data(), false, 0.0, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { x, w }, needs))
    }

    /// Batched `a · b` (or `a · bᵀ` with `trans_b`) for rank-3 operands.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) {
            return Err(shape_err("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (batch, n, k) = (av.dim(0), av.dim(1), av.dim(2));
        let (kb, m) = if trans_b {
            (bv.dim(2), bv.dim(1))
        } else {
            (bv.dim(1), bv.dim(2))
        };
        if kb != k {
            return Err(shape_err("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; batch * n * m];
        for i in 0..batch {
            kernels::gemm(
                n,
                k,
                m,
                &av.data()[i * n * k..(i + 1) * n * k],
                false,
                &bv.data()[i * k * m..(i + 1) * k * m],
                trans_b,
                0.0,
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(&[batch, n, m], out)?,
            Op::Bmm { a, b, trans_b },
            needs,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {}", r)));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat(&tensors, axis)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice(self.value(x), axis, start, len)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, needs))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if axis >= self.value(x).rank() || total != self.value(x).dim(axis) {
            return Err(shape_err(
                "split",
                format!("{:?} on axis {} of {:?}", sizes, axis, self.shape(x)),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), "mul", |p, q| p * q)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    /// `x + v` with `v` broadcast over leading axes (trailing-suffix shape or a single value).
    pub fn add_bcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.bcast(x, v, "add_bcast", |a, b| a + b)?;
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(out, Op::AddBcast { x, v }, needs))
    }

    /// `x ⊙ v` with `v` broadcast as in [`Graph::add_bcast`].
    pub fn mul_bcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.bcast(x, v, "mul_bcast", |a, b| a * b)?;
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(out, Op::MulBcast { x, v }, needs))
    }

    fn bcast(&self, x: Var, v: Var, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (xv, vv) = (self.value(x), self.value(v));
        if !bcast_ok(xv, vv) {
            return Err(shape_err(op, format!("{:?} with {:?}", xv.shape(), vv.shape())));
        }
        let vl = vv.len();
        let vd = vv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, vd[i % vl]))
            .collect();
        Tensor::new(xv.shape(), data)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).scale(c);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale { x, c }, needs))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        Ok(self.push(out, Op::AddScalar { x }, needs))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(shape_err("mean", format!("axis {} of {:?}", axis, xv.shape())));
        }
        let (outer, size, inner) = kernels::split_at_axis(xv.shape(), axis);
        let mut out = vec![0.0f32; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0f64;
                for a in 0..size {
                    s += d[(o * size + a) * inner + i] as f64;
                }
                out[o * inner + i] = (s / size as f64) as f32;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mean { x, axis }, needs))
    }

    /// Mean of all entries as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(shape_err("mean_all", format!("empty tensor")));
        }
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / xv.len() as f64) as f32);
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanAll { x }, needs))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = *xv.shape().last().ok_or_else(|| shape_err("softmax", format!("rank 0")))?;
        let mut out = xv.clone();
        kernels::softmax_rows(out.data_mut(), w);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { x }, needs))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("log_softmax", format!("rank 0")))?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(w) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = row.iter().map(|&v| libm::expf(v - max)).sum();
            let lse = max + libm::logf(s);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::LogSoftmax { x }, needs))
    }

    /// Layer norm over the last axis without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", format!("rank 0")))?;
        let mut out = Tensor::zeros(xv.shape());
        let inv_std = kernels::layer_norm_rows(xv.data(), w, out.data_mut());
        let needs = self.needs(x);
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Gelu { x }, needs))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        let needs = self.needs(x);
        Ok(self.push(out, Op::Silu { x }, needs))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::expf);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Exp { x }, needs))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * n);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Expand { x }, needs))
    }

    /// Rotary embedding on `[batch, positions, heads, head_dim]`; `cos`/`sin`
    /// hold `positions × head_dim/2` angles' cosines and sines.
    pub fn rope(&mut self, x: Var, cos: &[f32], sin: &[f32]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[3] % 2 != 0 || cos.len() != s[1] * s[3] / 2 || sin.len() != cos.len() {
            return Err(shape_err(
                "rope",
                format!("{:?} with {} angles", s, cos.len()),
            ));
        }
        let mut out = Tensor::zeros(s);
        kernels::rope_apply(xv.data(), s, cos, sin, 1.0, out.data_mut());
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
            needs,
        ))
    }

    /// Copies leading-axis entries `0..h` from `src` into `x`.
    pub fn assign_frames(&mut self, x: Var, src: Var, h: usize) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(src));
        if xv.shape() != sv.shape() || xv.rank() == 0 || h > xv.dim(0) {
            return Err(shape_err(
                "assign_frames",
                format!("{:?} <- {:?} with h={}", xv.shape(), sv.shape(), h),
            ));
        }
        let per = xv.len() / xv.dim(0).max(1);
        let mut out = xv.clone();
        out.data_mut()[..h * per].copy_from_slice(&sv.data()[..h * per]);
        let needs = self.needs(x) || self.needs(src);
        Ok(self.push(out, Op::AssignFrames { x, src, h }, needs))
    }

    /// Propagates cotangents from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, m) = (wv.dim(0), wv.dim(1));
                let rows = xv.len() / k.max(1);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * k];
                    kernels::gemm(rows, m, k, g.data(), false, wv.data(), true, 0.0, &mut dx);
                    self.send(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * m];
                    kernels::gemm(k, rows, m, xv.data(), true, g.data(), false, 0.0, &mut dw);
                    self.send(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, n, k) = (av.dim(0), av.dim(1), av.dim(2));
                let m = y.dim(2);
                let gd = g.data();
                if self.needs(*a) {
                    let mut da = vec![0.0; av.len()];
                    for i in 0..batch {
                        let gi = &gd[i * n * m..(i + 1) * n * m];
                        let bi = &bv.data()[i * k * m..(i + 1) * k * m];
                        // da = g · op(b)ᵀ
                        kernels::gemm(
                            n,
                            m,
                            k,
                            gi,
                            false,
                            bi,
                            !*trans_b,
                            0.0,
                            &mut da[i * n * k..(i + 1) * n * k],
                        );
                    }
                    self.send(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..batch {
                        let gi = &gd[i * n * m..(i + 1) * n * m];
                        let ai = &av.data()[i * n * k..(i + 1) * n * k];
                        let dbi = &mut db[i * k * m..(i + 1) * k * m];
                        if *trans_b {
                            // b is m×k: db = gᵀ · a
                            kernels::gemm(m, n, k, gi, true, ai, false, 0.0, dbi);
                        } else {
                            // b is k×m: db = aᵀ · g
                            kernels::gemm(k, n, m, ai, true, gi, false, 0.0, dbi);
                        }
                    }
                    self.send(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                self.send(grads, *x, kernels::permute(g, &inv));
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).dim(*axis);
                    if self.needs(p) {
                        self.send(grads, p, kernels::slice(g, *axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                kernels::slice_accumulate(&mut dx, g, *axis, *start);
                self.send(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.scale(-1.0));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.send(grads, *a, g.zip(bv, "mul", |p, q| p * q)?);
                }
                if self.needs(*b) {
                    self.send(grads, *b, g.zip(av, "mul", |p, q| p * q)?);
                }
            }
            Op::AddBcast { x, v } => {
                self.send(grads, *x, g.clone());
                if self.needs(*v) {
                    let vv = self.value(*v);
                    let vl = vv.len();
                    let mut acc = vec![0.0f64; vl];
                    for (i, &gi) in g.data().iter().enumerate() {
                        acc[i % vl] += gi as f64;
                    }
                    let dv = acc.into_iter().map(|s| s as f32).collect();
                    self.send(grads, *v, Tensor::new(vv.shape(), dv)?);
                }
            }
            Op::MulBcast { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let vl = vv.len();
                if self.needs(*x) {
                    let vd = vv.data();
                    let dx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * vd[i % vl])
                        .collect();
                    self.send(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.needs(*v) {
                    let mut acc = vec![0.0f64; vl];
                    for (i, (&gi, &xi)) in g.data().iter().zip(xv.data()).enumerate() {
                        acc[i % vl] += (gi * xi) as f64;
                    }
                    let dv = acc.into_iter().map(|s| s as f32).collect();
                    self.send(grads, *v, Tensor::new(vv.shape(), dv)?);
                }
            }
            Op::Scale { x, c } => self.send(grads, *x, g.scale(*c)),
            Op::AddScalar { x } => self.send(grads, *x, g.clone()),
            Op::Mean { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, size, inner) = kernels::split_at_axis(&xs, *axis);
                let inv = 1.0 / size as f32;
                let mut dx = vec![0.0; outer * size * inner];
                for o in 0..outer {
                    for a in 0..size {
                        for i in 0..inner {
                            dx[(o * size + a) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                self.send(grads, *x, Tensor::new(&xs, dx)?);
            }
            Op::MeanAll { x } => {
                let xs = self.shape(*x);
                let v = g.item() / self.value(*x).len() as f32;
                self.send(grads, *x, Tensor::full(xs, v));
            }
            Op::Softmax { x } => {
                let w = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(w)
                    .zip(g.data().chunks(w))
                    .zip(dx.chunks_mut(w))
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.send(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::LogSoftmax { x } => {
                let w = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(w)
                    .zip(g.data().chunks(w))
                    .zip(dx.chunks_mut(w))
                {
                    let sum: f32 = gr.iter().sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gi - libm::expf(yi) * sum;
                    }
                }
                self.send(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let w = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for (((yr, gr), dr), &inv) in y
                    .data()
                    .chunks(w)
                    .zip(g.data().chunks(w))
                    .zip(dx.chunks_mut(w))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().map(|&v| v as f64).sum::<f64>() / w as f64;
                    let mean_gy = gr
                        .iter()
                        .zip(yr)
                        .map(|(&a, &b)| (a * b) as f64)
                        .sum::<f64>()
                        / w as f64;
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = inv * (gi - mean_g as f32 - yi * mean_gy as f32);
                    }
                }
                self.send(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let dx = g.zip(xv, "gelu", |gi, xi| gi * kernels::gelu_grad(xi))?;
                self.send(grads, *x, dx);
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let dx = g.zip(xv, "silu", |gi, xi| {
                    let s = kernels::sigmoid(xi);
                    gi * (s + xi * s * (1.0 - s))
                })?;
                self.send(grads, *x, dx);
            }
            Op::Exp { x } => {
                self.send(grads, *x, g.zip(y, "exp", |gi, yi| gi * yi)?);
            }
            Op::Expand { x } => {
                let xs = self.shape(*x).to_vec();
                let per = y.len() / y.dim(0).max(1);
                let mut acc = vec![0.0f64; per];
                for chunk in g.data().chunks(per) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v as f64;
                    }
                }
                let dx = acc.into_iter().map(|s| s as f32).collect();
                self.send(grads, *x, Tensor::new(&xs, dx)?);
            }
            Op::Rope { x, cos, sin } => {
                let mut dx = Tensor::zeros(y.shape());
                kernels::rope_apply(g.data(), y.shape(), cos, sin, -1.0, dx.data_mut());
                self.send(grads, *x, dx);
            }
            Op::AssignFrames { x, src, h } => {
                let per = y.len() / y.dim(0).max(1);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.data_mut()[..h * per].iter_mut().for_each(|v| *v = 0.0);
                    self.send(grads, *x, dx);
                }
                if self.needs(*src) {
                    let mut ds = Tensor::zeros(y.shape());
                    ds.data_mut()[..h * per].copy_from_slice(&g.data()[..h * per]);
                    self.send(grads, *src, ds);
                }
            }
        }
        Ok(())
    }
}
