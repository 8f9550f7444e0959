//! Reverse-mode automatic differentiation over the operator set the network needs.
//!
//! A [`Tape`] records every operation in execution order. [`Tape::backward`]
//! replays the adjoints in exact reverse order and accumulates gradients on
//! the leaves that require them.

mod kernels;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::data::axis_taps;
use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) use kernels::{bmm, broadcast_offsets, softmax_rows, transpose_last_two};
use kernels::{axpy, dot, split_axis, ConvGeom};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GlobalPool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    WidthScores {
        q: Var,
        k: Var,
    },
    Softmax {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    PixelShuffle {
        x: Var,
        s: usize,
    },
    Warp {
        m: Var,
        f: Var,
    },
    Bmm {
        a: Var,
        b: Var,
    },
    Diff {
        x: Var,
        axis: usize,
    },
    DiagDiff {
        x: Var,
    },
    ResizeBicubic {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    UpscaleAttention {
        x: Var,
        s: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Reshape { .. } => "reshape",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Concat { .. } => "concat",
            Op::GlobalPool { .. } => "global_pool_spatial",
            Op::ChannelPool { .. } => "pool_across_channels",
            Op::WidthScores { .. } => "batched_width_scores",
            Op::Softmax { .. } => "softmax_last_axis",
            Op::Transpose { .. } => "transpose_last_two",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::Warp { .. } => "warp",
            Op::Bmm { .. } => "bmm",
            Op::Diff { .. } => "diff",
            Op::DiagDiff { .. } => "diag_diff",
            Op::ResizeBicubic { .. } => "resize_bicubic",
            Op::UpscaleAttention { .. } => "upscale_attention",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations plus accumulated leaf gradients.
///
/// Single-threaded. Gradients accumulate across repeated [`backward`](Self::backward)
/// calls until [`zero_grad`](Self::zero_grad).
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    adjoint_fault: Option<String>,
    discrete: Vec<u8>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            adjoint_fault: None,
            discrete: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: perturbs the adjoint of every operation named `op` so that
    /// gradient checks can be shown to fail.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, op: &str) {
        self.adjoint_fault = Some(op.into());
    }

    /// Records a discrete decision taken outside the tape (for example a
    /// thresholded mask) so that [`branch_signature`](Self::branch_signature)
    /// reflects it.
    pub fn note_discrete(&mut self, bits: impl IntoIterator<Item = bool>) {
        self.discrete.extend(bits.into_iter().map(u8::from));
    }

    /// Hash of every piecewise branch taken so far: activation signs of
    /// ReLU-type and absolute-value inputs, max-pooling winners, and noted
    /// discrete decisions. Two evaluations with equal signatures lie in the
    /// same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } | Op::LeakyRelu { x, .. } => {
                    for &v in self.nodes[x.index].value.data() {
                        eat(u64::from(v > T::zero()));
                    }
                }
                Op::Abs { x } => {
                    for &v in self.nodes[x.index].value.data() {
                        eat(u64::from(v > T::zero()) | (u64::from(v < T::zero()) << 1));
                    }
                }
                Op::GlobalPool { argmax, .. } | Op::ChannelPool { argmax, .. } => {
                    for &a in argmax {
                        eat(a as u64);
                    }
                }
                _ => {}
            }
        }
        for &d in &self.discrete {
            eat(u64::from(d) + 2);
        }
        h
    }

    /// Records a leaf that accumulates a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Accumulated gradient of a leaf, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::InvalidState(alloc::format!(
                "variable {:?} is not recorded on this tape",
                v
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            index,
            tape: self.id,
        }
    }

    fn record(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.push(value, op, requires_grad)
    }

    // ----------------------------------------------------------------- ops

    /// 2-D convolution with zero padding. Weight is C_out × C_in × k × k.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        if stride == 0 || dilation == 0 {
            return Err(invalid!(
                "conv2d stride ({}) and dilation ({}) must be positive",
                stride,
                dilation
            ));
        }
        let (batch, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(invalid!(
                "conv2d input has {} channels but weight expects {}",
                c_in,
                wc_in
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(invalid!("conv2d kernel must be square and odd, got {}x{}", kh, kw));
        }
        if self.value(b).shape() != [c_out] {
            return Err(invalid!(
                "conv2d bias shape {:?} does not match {} output channels",
                self.value(b).shape(),
                c_out
            ));
        }
        let span = dilation * (kh - 1) + 1;
        if h + 2 * padding < span || wd + 2 * padding < span {
            return Err(invalid!(
                "conv2d input {}x{} with padding {} is smaller than the dilated kernel {}",
                h,
                wd,
                padding,
                span
            ));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride,
            padding,
            dilation,
            h_out: (h + 2 * padding - span) / stride + 1,
            w_out: (wd + 2 * padding - span) / stride + 1,
        };
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = Tensor::new(&[batch, c_out, geom.h_out, geom.w_out], y)?;
        Ok(self.record(out, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Convolution with stride 1 and "same" padding `dilation·(k−1)/2`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let k = self.value(w).shape().get(2).copied().unwrap_or(1);
        let padding = dilation * (k.saturating_sub(1)) / 2;
        self.conv2d(x, w, b, 1, padding, dilation)
    }

    /// Dense layer: `[B, in] x [out, in]ᵀ + [out] -> [B, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (batch, n_in, n_out) = match (xs, ws) {
            ([bt, i], [o, wi]) if i == wi => (*bt, *i, *o),
            _ => return Err(invalid!("linear shape mismatch: input {:?}, weight {:?}", xs, ws)),
        };
        if self.value(b).shape() != [n_out] {
            return Err(invalid!("linear bias must have shape [{}]", n_out));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = Vec::with_capacity(batch * n_out);
        for bi in 0..batch {
            let row = &xd[bi * n_in..(bi + 1) * n_in];
            for o in 0..n_out {
                y.push(bd[o] + dot(&wd[o * n_in..(o + 1) * n_in], row));
            }
        }
        let out = Tensor::new(&[batch, n_out], y)?;
        Ok(self.record(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(out, Op::Reshape { x }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        Ok(self.record(out, Op::Sigmoid { x }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.record(out, Op::Relu { x }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.check(x)?;
        let a = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        Ok(self.record(out, Op::LeakyRelu { x, slope }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let offs = broadcast_offsets(ta.shape(), tb.shape()).ok_or_else(|| {
                invalid!(
                    "shapes {:?} and {:?} are not broadcast-compatible",
                    ta.shape(),
                    tb.shape()
                )
            })?;
            let bd = tb.data();
            ta.data().iter().zip(offs).map(|(&x, o)| f(x, bd[o])).collect()
        };
        Tensor::new(ta.shape(), data)
    }

    /// Elementwise sum; `b` may broadcast along singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.record(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.record(out, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` may broadcast along singleton axes (attention gating).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.record(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let f = T::of(factor);
        let out = self.value(x).map(|v| v * f);
        Ok(self.record(out, Op::Scale { x, factor }, &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.abs());
        Ok(self.record(out, Op::Abs { x }, &[x]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * v);
        Ok(self.record(out, Op::Square { x }, &[x]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid!("concat of zero inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid!("concat axis {} out of range for rank {}", axis, base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(invalid!("concat shape mismatch {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Per-channel reduction over all spatial positions: B×C×H×W → B×C×1×1.
    ///
    /// Max ties resolve to the lowest row-major index.
    pub fn global_pool_spatial(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        self.check(x)?;
        let (b, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(invalid!("global pooling over empty spatial extent"));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::new();
        for p in xd.chunks(plane) {
            match mode {
                PoolMode::Mean => out.push(p.iter().copied().sum::<T>() / T::of(plane as f64)),
                PoolMode::Max => {
                    let mut best = 0;
                    for i in 1..plane {
                        if p[i] > p[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(p[best]);
                }
            }
        }
        let out = Tensor::new(&[b, c, 1, 1], out)?;
        Ok(self.record(out, Op::GlobalPool { x, mode, argmax }, &[x]))
    }

    /// Per-position reduction over channels: B×C×H×W → B×1×H×W.
    ///
    /// Max ties resolve to the lowest channel index.
    pub fn pool_across_channels(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        self.check(x)?;
        let (b, c, h, w) = self.value(x).dims4()?;
        if c == 0 {
            return Err(invalid!("channel pooling over zero channels"));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * plane];
        let mut argmax = vec![0usize; if mode == PoolMode::Max { b * plane } else { 0 }];
        for bi in 0..b {
            let dst = &mut out[bi * plane..(bi + 1) * plane];
            match mode {
                PoolMode::Mean => {
                    for ci in 0..c {
                        let src = &xd[(bi * c + ci) * plane..][..plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                    let inv = T::one() / T::of(c as f64);
                    for d in dst.iter_mut() {
                        *d = *d * inv;
                    }
                }
                PoolMode::Max => {
                    let am = &mut argmax[bi * plane..(bi + 1) * plane];
                    dst.copy_from_slice(&xd[bi * c * plane..][..plane]);
                    for ci in 1..c {
                        let src = &xd[(bi * c + ci) * plane..][..plane];
                        for p in 0..plane {
                            if src[p] > dst[p] {
                                dst[p] = src[p];
                                am[p] = ci;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.record(out, Op::ChannelPool { x, mode, argmax }, &[x]))
    }

    /// out(b,h,i,j) = Σ_c q(b,c,h,i)·k(b,c,h,j).
    pub fn batched_width_scores(&mut self, q: Var, k: Var) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        if self.value(q).shape() != self.value(k).shape() {
            return Err(invalid!(
                "width scores need equal shapes, got {:?} and {:?}",
                self.value(q).shape(),
                self.value(k).shape()
            ));
        }
        let (b, c, h, w) = self.value(q).dims4()?;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::zero(); b * h * w * w];
        for bi in 0..b {
            for hi in 0..h {
                let dst = &mut out[(bi * h + hi) * w * w..][..w * w];
                for ci in 0..c {
                    let base = ((bi * c + ci) * h + hi) * w;
                    let krow = &kd[base..base + w];
                    for i in 0..w {
                        axpy(&mut dst[i * w..(i + 1) * w], qd[base + i], krow);
                    }
                }
            }
        }
        let out = Tensor::new(&[b, h, w, w], out)?;
        Ok(self.record(out, Op::WidthScores { q, k }, &[q, k]))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| invalid!("softmax of a scalar"))?;
        if n == 0 {
            return Err(invalid!("softmax over an empty axis"));
        }
        let out = Tensor::new(t.shape(), softmax_rows(t.data(), n))?;
        Ok(self.record(out, Op::Softmax { x }, &[x]))
    }

    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let r = t.rank();
        if r < 2 {
            return Err(invalid!("transpose_last_two needs rank >= 2, got {}", r));
        }
        let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(&shape, transpose_last_two(t.data(), m, n))?;
        Ok(self.record(out, Op::Transpose { x }, &[x]))
    }

    /// B×(C·s²)×H×W → B×C×sH×sW. Channel `g·s² + c` of group `g` lands at
    /// spatial offset `(c / s, c % s)`.
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        self.check(x)?;
        let (b, c, h, w) = self.value(x).dims4()?;
        if s == 0 || c % (s * s) != 0 {
            return Err(invalid!("pixel_shuffle: {} channels not divisible by {}²", c, s));
        }
        let c_out = c / (s * s);
        let map = kernels::pixel_shuffle_map(b, c_out, h, w, s);
        let xd = self.value(x).data();
        let data = map.iter().map(|&i| xd[i]).collect();
        let out = Tensor::new(&[b, c_out, h * s, w * s], data)?;
        Ok(self.record(out, Op::PixelShuffle { x, s }, &[x]))
    }

    /// Row-wise attention warping: out(b,c,h,i) = Σ_j m(b,h,i,j)·f(b,c,h,j).
    pub fn warp(&mut self, m: Var, f: Var) -> Result<Var> {
        self.check(m)?;
        self.check(f)?;
        let (mb, mh, wo, ws) = self.value(m).dims4()?;
        let (b, c, h, w) = self.value(f).dims4()?;
        if mb != b || mh != h || ws != w {
            return Err(invalid!(
                "warp map {:?} incompatible with features {:?}",
                self.value(m).shape(),
                self.value(f).shape()
            ));
        }
        let (md, fd) = (self.value(m).data(), self.value(f).data());
        let mut out = vec![T::zero(); b * c * h * wo];
        for bi in 0..b {
            for hi in 0..h {
                let mm = &md[(bi * h + hi) * wo * ws..][..wo * ws];
                for ci in 0..c {
                    let frow = &fd[((bi * c + ci) * h + hi) * w..][..w];
                    let orow = &mut out[((bi * c + ci) * h + hi) * wo..][..wo];
                    for (i, o) in orow.iter_mut().enumerate() {
                        *o = dot(&mm[i * ws..(i + 1) * ws], frow);
                    }
                }
            }
        }
        let out = Tensor::new(&[b, c, h, wo], out)?;
        Ok(self.record(out, Op::Warp { m, f }, &[m, f]))
    }

    /// Batched matrix product over the last two axes; leading axes must agree.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(invalid!("bmm shape mismatch {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let l: usize = sa[..r - 2].iter().product();
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let data = bmm(self.value(a).data(), self.value(b).data(), l, m, k, n);
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(out, Op::Bmm { a, b }, &[a, b]))
    }

    /// Forward difference along `axis`: out[..k..] = x[..k+1..] − x[..k..].
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if axis >= t.rank() || t.shape()[axis] < 2 {
            return Err(invalid!("diff along axis {} of shape {:?}", axis, t.shape()));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = n - 1;
        let xd = t.data();
        let mut data = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            for k in 0..n - 1 {
                let lo = &xd[(o * n + k) * inner..][..inner];
                let hi = &xd[(o * n + k + 1) * inner..][..inner];
                data.extend(hi.iter().zip(lo).map(|(&a, &b)| a - b));
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(out, Op::Diff { x, axis }, &[x]))
    }

    /// Difference along the main diagonal of the last two axes:
    /// out[.., i, j] = x[.., i+1, j+1] − x[.., i, j].
    pub fn diag_diff(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let r = t.rank();
        if r < 2 || t.shape()[r - 2] < 2 || t.shape()[r - 1] < 2 {
            return Err(invalid!("diag_diff of shape {:?}", t.shape()));
        }
        let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
        let mut shape = t.shape().to_vec();
        shape[r - 2] = m - 1;
        shape[r - 1] = n - 1;
        let xd = t.data();
        let mut data = Vec::with_capacity(t.numel() / (m * n) * (m - 1) * (n - 1));
        for slice in xd.chunks(m * n) {
            for i in 0..m - 1 {
                for j in 0..n - 1 {
                    data.push(slice[(i + 1) * n + j + 1] - slice[i * n + j]);
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(out, Op::DiagDiff { x }, &[x]))
    }

    /// Separable bicubic resize of every H×W plane of a B×C×H×W tensor, with
    /// the same kernel and coordinate convention as
    /// [`bicubic_resample`](crate::data::bicubic_resample).
    pub fn resize_bicubic(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(x)?;
        let (b, c, h, w) = self.value(x).dims4()?;
        if h < 4 || w < 4 || out_h == 0 || out_w == 0 {
            return Err(invalid!("bicubic resize {}×{} → {}×{}", h, w, out_h, out_w));
        }
        let tx = axis_taps(w, out_w);
        let ty = axis_taps(h, out_h);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(b * c * out_h * out_w);
        let mut rows = vec![T::zero(); h * out_w];
        for plane in xd.chunks(h * w) {
            for y in 0..h {
                for (o, taps) in tx.iter().enumerate() {
                    rows[y * out_w + o] = taps.iter().map(|&(i, wt)| T::of(wt) * plane[y * w + i]).sum();
                }
            }
            for taps in &ty {
                for o in 0..out_w {
                    data.push(taps.iter().map(|&(i, wt)| T::of(wt) * rows[i * out_w + o]).sum());
                }
            }
        }
        let out = Tensor::new(&[b, c, out_h, out_w], data)?;
        Ok(self.record(out, Op::ResizeBicubic { x, out_h, out_w }, &[x]))
    }

    /// Nearest-neighbor replication of a B×H×W×W attention map along its three
    /// positional axes, renormalized to stay row-stochastic (each row gains `s`
    /// copies of every entry, so entries are divided by `s`).
    pub fn upscale_attention(&mut self, x: Var, s: usize) -> Result<Var> {
        self.check(x)?;
        let (b, h, wi, wj) = self.value(x).dims4()?;
        if s == 0 {
            return Err(invalid!("attention upscale factor must be positive"));
        }
        let xd = self.value(x).data();
        let inv = T::one() / T::of(s as f64);
        let (oh, oi, oj) = (h * s, wi * s, wj * s);
        let mut data = Vec::with_capacity(b * oh * oi * oj);
        for bi in 0..b {
            for y in 0..oh {
                for i in 0..oi {
                    let row = &xd[((bi * h + y / s) * wi + i / s) * wj..][..wj];
                    for j in 0..oj {
                        data.push(row[j / s] * inv);
                    }
                }
            }
        }
        let out = Tensor::new(&[b, oh, oi, oj], data)?;
        Ok(self.record(out, Op::UpscaleAttention { x, s }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.record(Tensor::scalar(total), Op::Sum { x }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(invalid!("mean of an empty tensor"));
        }
        let m = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        Ok(self.record(Tensor::scalar(m), Op::Mean { x }, &[x]))
    }

    // ------------------------------------------------------------ backward

    /// Reverse accumulation from a scalar `loss` into every reachable leaf
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.index + 1];
        adj[loss.index] = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + v;
                        }
                    }
                    None => *slot = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            let mut contributions = self.adjoint(i, &g)?;
            if self.adjoint_fault.as_deref() == Some(node.op.name()) {
                for (_, c) in contributions.iter_mut() {
                    for v in c.iter_mut() {
                        *v = *v * T::of(1.5);
                    }
                }
            }
            for (v, c) in contributions {
                match &mut adj[v.index] {
                    Some(acc) => {
                        for (a, &x) in acc.iter_mut().zip(&c) {
                            *a = *a + x;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Input adjoints of node `i` given its output adjoint `g`, only for inputs
    /// that require a gradient.
    fn adjoint(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        let wants = |v: Var| self.nodes[v.index].requires_grad;
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if wants(*x) {
                    out.push((*x, kernels::conv2d_backward_input(geom, g, val(*w).data())));
                }
                if wants(*w) || wants(*b) {
                    let (dw, db) = kernels::conv2d_backward_params(geom, g, val(*x).data());
                    if wants(*w) {
                        out.push((*w, dw));
                    }
                    if wants(*b) {
                        out.push((*b, db));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, n_in) = (val(*x).shape()[0], val(*x).shape()[1]);
                let n_out = val(*w).shape()[0];
                let (xd, wd) = (val(*x).data(), val(*w).data());
                if wants(*x) {
                    let mut dx = vec![T::zero(); batch * n_in];
                    for bi in 0..batch {
                        for o in 0..n_out {
                            axpy(
                                &mut dx[bi * n_in..(bi + 1) * n_in],
                                g[bi * n_out + o],
                                &wd[o * n_in..(o + 1) * n_in],
                            );
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); n_out * n_in];
                    for bi in 0..batch {
                        for o in 0..n_out {
                            axpy(
                                &mut dw[o * n_in..(o + 1) * n_in],
                                g[bi * n_out + o],
                                &xd[bi * n_in..(bi + 1) * n_in],
                            );
                        }
                    }
                    out.push((*w, dw));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); n_out];
                    for bi in 0..batch {
                        for o in 0..n_out {
                            db[o] = db[o] + g[bi * n_out + o];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Sigmoid { x } => {
                if wants(*x) {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                    out.push((*x, d));
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xd = val(*x).data();
                    let d = g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if wants(*x) {
                    let a = T::of(*slope);
                    let xd = val(*x).data();
                    let d = g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { a * gv })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                let is_mul = matches!(node.op, Op::Mul { .. });
                let (ta, tb) = (val(*a), val(*b));
                let offs = if ta.shape() == tb.shape() {
                    None
                } else {
                    broadcast_offsets(ta.shape(), tb.shape())
                };
                let boff = |e: usize| offs.as_ref().map_or(e, |o| o[e]);
                if wants(*a) {
                    let d = if is_mul {
                        let bd = tb.data();
                        g.iter().enumerate().map(|(e, &gv)| gv * bd[boff(e)]).collect()
                    } else {
                        g.to_vec()
                    };
                    out.push((*a, d));
                }
                if wants(*b) {
                    let mut d = vec![T::zero(); tb.numel()];
                    let ad = ta.data();
                    for (e, &gv) in g.iter().enumerate() {
                        let contrib = if is_mul {
                            gv * ad[e]
                        } else if negate {
                            -gv
                        } else {
                            gv
                        };
                        let slot = &mut d[boff(e)];
                        *slot = *slot + contrib;
                    }
                    out.push((*b, d));
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    let f = T::of(*factor);
                    out.push((*x, g.iter().map(|&v| v * f).collect()));
                }
            }
            Op::Abs { x } => {
                if wants(*x) {
                    let xd = val(*x).data();
                    let d = g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Square { x } => {
                if wants(*x) {
                    let xd = val(*x).data();
                    let two = T::of(2.0);
                    out.push((*x, g.iter().zip(xd).map(|(&gv, &xv)| two * xv * gv).collect()));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let ext = val(v).shape()[*axis];
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        out.push((v, d));
                    }
                    start += ext;
                }
            }
            Op::GlobalPool { x, mode, argmax } => {
                if wants(*x) {
                    let (_, _, h, w) = val(*x).dims4()?;
                    let plane = h * w;
                    let mut d = vec![T::zero(); val(*x).numel()];
                    for (p, &gv) in g.iter().enumerate() {
                        let dst = &mut d[p * plane..(p + 1) * plane];
                        match mode {
                            PoolMode::Mean => {
                                let share = gv / T::of(plane as f64);
                                dst.fill(share);
                            }
                            PoolMode::Max => dst[argmax[p]] = gv,
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::ChannelPool { x, mode, argmax } => {
                if wants(*x) {
                    let (b, c, h, w) = val(*x).dims4()?;
                    let plane = h * w;
                    let mut d = vec![T::zero(); val(*x).numel()];
                    for bi in 0..b {
                        let gp = &g[bi * plane..(bi + 1) * plane];
                        match mode {
                            PoolMode::Mean => {
                                let inv = T::one() / T::of(c as f64);
                                for ci in 0..c {
                                    let dst = &mut d[(bi * c + ci) * plane..][..plane];
                                    for (dv, &gv) in dst.iter_mut().zip(gp) {
                                        *dv = gv * inv;
                                    }
                                }
                            }
                            PoolMode::Max => {
                                for p in 0..plane {
                                    let ci = argmax[bi * plane + p];
                                    d[(bi * c + ci) * plane + p] = gp[p];
                                }
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::WidthScores { q, k } => {
                let (b, c, h, w) = val(*q).dims4()?;
                let (qd, kd) = (val(*q).data(), val(*k).data());
                if wants(*q) {
                    let mut dq = vec![T::zero(); qd.len()];
                    for bi in 0..b {
                        for hi in 0..h {
                            let gm = &g[(bi * h + hi) * w * w..][..w * w];
                            for ci in 0..c {
                                let base = ((bi * c + ci) * h + hi) * w;
                                let krow = &kd[base..base + w];
                                for i in 0..w {
                                    dq[base + i] = dot(&gm[i * w..(i + 1) * w], krow);
                                }
                            }
                        }
                    }
                    out.push((*q, dq));
                }
                if wants(*k) {
                    let mut dk = vec![T::zero(); kd.len()];
                    for bi in 0..b {
                        for hi in 0..h {
                            let gm = &g[(bi * h + hi) * w * w..][..w * w];
                            for ci in 0..c {
                                let base = ((bi * c + ci) * h + hi) * w;
                                for i in 0..w {
                                    axpy(&mut dk[base..base + w], qd[base + i], &gm[i * w..(i + 1) * w]);
                                }
                            }
                        }
                    }
                    out.push((*k, dk));
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let y = node.value.data();
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                        let s = dot(yr, gr);
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - s);
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Transpose { x } => {
                if wants(*x) {
                    let s = node.value.shape();
                    let r = s.len();
                    out.push((*x, transpose_last_two(g, s[r - 2], s[r - 1])));
                }
            }
            Op::PixelShuffle { x, s } => {
                if wants(*x) {
                    let (b, c, h, w) = val(*x).dims4()?;
                    let map = kernels::pixel_shuffle_map(b, c / (s * s), h, w, *s);
                    let mut d = vec![T::zero(); val(*x).numel()];
                    for (o, &src) in map.iter().enumerate() {
                        d[src] = g[o];
                    }
                    out.push((*x, d));
                }
            }
            Op::Warp { m, f } => {
                let (b, c, h, w) = val(*f).dims4()?;
                let wo = val(*m).shape()[2];
                let (md, fd) = (val(*m).data(), val(*f).data());
                if wants(*m) {
                    let mut dm = vec![T::zero(); md.len()];
                    for bi in 0..b {
                        for hi in 0..h {
                            let dmm = &mut dm[(bi * h + hi) * wo * w..][..wo * w];
                            for ci in 0..c {
                                let frow = &fd[((bi * c + ci) * h + hi) * w..][..w];
                                let grow = &g[((bi * c + ci) * h + hi) * wo..][..wo];
                                for (i, &gv) in grow.iter().enumerate() {
                                    axpy(&mut dmm[i * w..(i + 1) * w], gv, frow);
                                }
                            }
                        }
                    }
                    out.push((*m, dm));
                }
                if wants(*f) {
                    let mut df = vec![T::zero(); fd.len()];
                    for bi in 0..b {
                        for hi in 0..h {
                            let mm = &md[(bi * h + hi) * wo * w..][..wo * w];
                            for ci in 0..c {
                                let grow = &g[((bi * c + ci) * h + hi) * wo..][..wo];
                                let drow = &mut df[((bi * c + ci) * h + hi) * w..][..w];
                                for (i, &gv) in grow.iter().enumerate() {
                                    axpy(drow, gv, &mm[i * w..(i + 1) * w]);
                                }
                            }
                        }
                    }
                    out.push((*f, df));
                }
            }
            Op::Bmm { a, b } => {
                let sa = val(*a).shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = val(*b).shape()[r - 1];
                let l: usize = sa[..r - 2].iter().product();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_last_two(bd, k, n);
                    out.push((*a, bmm(g, &bt, l, m, n, k)));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_last_two(ad, m, k);
                    out.push((*b, bmm(&at, g, l, k, m, n)));
                }
            }
            Op::Diff { x, axis } => {
                if wants(*x) {
                    let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                    let mut d = vec![T::zero(); val(*x).numel()];
                    for o in 0..outer {
                        for k in 0..n - 1 {
                            let gs = &g[(o * (n - 1) + k) * inner..][..inner];
                            for (t, &gv) in gs.iter().enumerate() {
                                let hi = (o * n + k + 1) * inner + t;
                                let lo = (o * n + k) * inner + t;
                                d[hi] = d[hi] + gv;
                                d[lo] = d[lo] - gv;
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::DiagDiff { x } => {
                if wants(*x) {
                    let shape = val(*x).shape();
                    let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let mut d = vec![T::zero(); val(*x).numel()];
                    let mut e = 0;
                    for base in (0..d.len()).step_by(m * n) {
                        for i in 0..m - 1 {
                            for j in 0..n - 1 {
                                let hi = base + (i + 1) * n + j + 1;
                                let lo = base + i * n + j;
                                d[hi] = d[hi] + g[e];
                                d[lo] = d[lo] - g[e];
                                e += 1;
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::ResizeBicubic { x, out_h, out_w } => {
                if wants(*x) {
                    let (_, _, h, w) = val(*x).dims4()?;
                    let (oh, ow) = (*out_h, *out_w);
                    let tx = axis_taps(w, ow);
                    let ty = axis_taps(h, oh);
                    let mut d = vec![T::zero(); val(*x).numel()];
                    let mut rows = vec![T::zero(); h * ow];
                    for (gp, dp) in g.chunks(oh * ow).zip(d.chunks_mut(h * w)) {
                        rows.iter_mut().for_each(|r| *r = T::zero());
                        for (oy, taps) in ty.iter().enumerate() {
                            for &(i, wt) in taps {
                                let wt = T::of(wt);
                                for o in 0..ow {
                                    rows[i * ow + o] = rows[i * ow + o] + wt * gp[oy * ow + o];
                                }
                            }
                        }
                        for y in 0..h {
                            for (o, taps) in tx.iter().enumerate() {
                                let gv = rows[y * ow + o];
                                for &(i, wt) in taps {
                                    dp[y * w + i] = dp[y * w + i] + T::of(wt) * gv;
                                }
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::UpscaleAttention { x, s } => {
                if wants(*x) {
                    let (b, h, wi, wj) = val(*x).dims4()?;
                    let inv = T::one() / T::of(*s as f64);
                    let (oh, oi, oj) = (h * s, wi * s, wj * s);
                    let mut d = vec![T::zero(); val(*x).numel()];
                    let mut e = 0;
                    for bi in 0..b {
                        for y in 0..oh {
                            for i in 0..oi {
                                let base = ((bi * h + y / s) * wi + i / s) * wj;
                                for j in 0..oj {
                                    d[base + j / s] = d[base + j / s] + g[e] * inv;
                                    e += 1;
                                }
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    out.push((*x, vec![g[0]; val(*x).numel()]));
                }
            }
            Op::Mean { x } => {
                if wants(*x) {
                    let n = val(*x).numel();
                    out.push((*x, vec![g[0] / T::of(n as f64); n]));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
