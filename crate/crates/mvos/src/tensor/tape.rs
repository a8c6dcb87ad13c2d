//! Wengert tape: ops record themselves during the forward pass, then
//! `backward` walks the records in reverse, accumulating gradients.
//!
//! A tape and its slots are confined to one thread. Parameters bind into a
//! tape at most once (re-binding returns the existing slot), so a kernel used
//! at every timestep of an unrolled sequence accumulates gradients across all
//! of its uses.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::conv::{bilinear_resize, bilinear_resize_backward, conv2d_backward, conv2d_forward, Conv2dSpec};
use super::{ParamId, Parameter, Shape, Tensor};

pub type VarId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointwiseKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltKind {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    GlobalAvgPool,
    Sum,
}

/// How the second operand of an elementwise op maps onto the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BroadcastKind {
    Same,
    /// b is [1, C, 1, 1]
    PerChannel,
    /// b is [1, 1, H, W]
    PerPixel,
    /// b is [1, C, H, W] against a batched a
    PerImage,
}

enum Op<E> {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: Conv2dSpec,
    },
    Pointwise {
        kind: PointwiseKind,
        x: VarId,
    },
    Elementwise {
        kind: EltKind,
        a: VarId,
        b: VarId,
        bcast: BroadcastKind,
    },
    Upsample {
        x: VarId,
    },
    MaxPool2 {
        x: VarId,
        argmax: Vec<u32>,
    },
    Reduce {
        kind: ReduceKind,
        x: VarId,
    },
    Scale {
        x: VarId,
        k: E,
    },
    Offset {
        x: VarId,
    },
    /// Scalar-valued op with an externally supplied local gradient
    /// (loss functions record themselves through this).
    CustomScalar {
        x: VarId,
        dloss_dx: Vec<E>,
    },
}

pub struct Tape<E> {
    slots: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    grads: Vec<Option<Vec<E>>>,
    bindings: HashMap<ParamId, VarId>,
    backward_done: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Tape<E> {
        Tape {
            slots: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            bindings: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, t: Tensor<E>, op: Op<E>) -> VarId {
        let id = self.slots.len();
        self.slots.push(t);
        self.ops.push(op);
        self.grads.push(None);
        id
    }

    fn check(&self, id: VarId) -> Result<()> {
        if id < self.slots.len() {
            Ok(())
        } else {
            Err(Error::Tape(format!("dangling var id {id} (tape has {} slots)", self.slots.len())))
        }
    }

    /// Record a constant input.
    pub fn leaf(&mut self, t: Tensor<E>) -> VarId {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    /// Record an input that should receive a gradient.
    pub fn leaf_grad(&mut self, t: Tensor<E>) -> VarId {
        let mut t = t;
        t.requires_grad = true;
        self.push(t, Op::Leaf)
    }

    /// Bind a parameter, reusing the existing slot on repeat binds.
    pub fn param(&mut self, p: &Parameter<E>) -> VarId {
        if let Some(&id) = self.bindings.get(&p.id()) {
            return id;
        }
        let mut t = p.value.clone();
        t.requires_grad = true;
        let id = self.push(t, Op::Leaf);
        self.bindings.insert(p.id(), id);
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.slots[id]
    }

    pub fn shape(&self, id: VarId) -> Shape {
        self.slots[id].shape
    }

    /// Clone a slot's current value out of the tape.
    pub fn detach(&self, id: VarId) -> Tensor<E> {
        Tensor::new(self.slots[id].shape, self.slots[id].data.clone())
    }

    pub fn grad(&self, id: VarId) -> Option<&[E]> {
        self.grads[id].as_deref()
    }

    pub fn param_grad(&self, p: &Parameter<E>) -> Option<&[E]> {
        self.bindings.get(&p.id()).and_then(|&id| self.grad(id))
    }

    pub fn param_slot(&self, p: &Parameter<E>) -> Option<VarId> {
        self.bindings.get(&p.id()).copied()
    }

    // ---- ops ------------------------------------------------------------

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, stride: usize, pad: usize) -> Result<VarId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        if x == w || Some(x) == b || Some(w) == b {
            return Err(Error::Tape("conv2d operands must be distinct slots".into()));
        }
        let spec = Conv2dSpec::resolve(
            self.slots[x].shape,
            self.slots[w].shape,
            b.map(|b| self.slots[b].shape),
            stride,
            pad,
        )?;
        let out = conv2d_forward(&spec, &self.slots[x], &self.slots[w], b.map(|b| &self.slots[b]));
        let mut out = out;
        out.requires_grad = self.slots[x].requires_grad
            || self.slots[w].requires_grad
            || b.map(|b| self.slots[b].requires_grad).unwrap_or(false);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    pub fn pointwise(&mut self, kind: PointwiseKind, x: VarId) -> Result<VarId> {
        self.check(x)?;
        let src = &self.slots[x];
        let data = match kind {
            PointwiseKind::Sigmoid => src
                .data
                .iter()
                .map(|&v| E::ONE / (E::ONE + (-v).exp()))
                .collect(),
            PointwiseKind::Tanh => src.data.iter().map(|&v| v.tanh()).collect(),
            PointwiseKind::Relu => src.data.iter().map(|&v| v.max(E::ZERO)).collect(),
        };
        let mut out = Tensor::new(src.shape, data);
        out.requires_grad = src.requires_grad;
        Ok(self.push(out, Op::Pointwise { kind, x }))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        self.pointwise(PointwiseKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        self.pointwise(PointwiseKind::Tanh, x)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        self.pointwise(PointwiseKind::Relu, x)
    }

    fn broadcast_kind(a: Shape, b: Shape) -> Result<BroadcastKind> {
        if a == b {
            return Ok(BroadcastKind::Same);
        }
        if b.n == 1 && b.c == a.c && b.h == 1 && b.w == 1 {
            return Ok(BroadcastKind::PerChannel);
        }
        if b.n == 1 && b.c == 1 && b.h == a.h && b.w == a.w {
            return Ok(BroadcastKind::PerPixel);
        }
        if b.n == 1 && a.n > 1 && b.c == a.c && b.h == a.h && b.w == a.w {
            return Ok(BroadcastKind::PerImage);
        }
        Err(Error::dim(
            "broadcast",
            a.numel(),
            b.numel(),
            format!("elementwise shapes {a} vs {b}"),
        ))
    }

    pub fn elementwise(&mut self, kind: EltKind, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.slots[a].shape, self.slots[b].shape);
        let bcast = Self::broadcast_kind(sa, sb)?;
        let mut out = Tensor::zeros(sa);
        {
            let av = &self.slots[a].data;
            let bv = &self.slots[b].data;
            apply_broadcast(sa, sb, bcast, av, bv, &mut out.data, kind);
        }
        out.requires_grad = self.slots[a].requires_grad || self.slots[b].requires_grad;
        Ok(self.push(out, Op::Elementwise { kind, a, b, bcast }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(EltKind::Add, a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise(EltKind::Mul, a, b)
    }

    pub fn upsample_bilinear(&mut self, x: VarId, out_h: usize, out_w: usize) -> Result<VarId> {
        self.check(x)?;
        let s = self.slots[x].shape;
        if out_h < s.h || out_w < s.w {
            return Err(Error::Config(format!(
                "upsample_bilinear target {out_h}x{out_w} smaller than input {}x{}",
                s.h, s.w
            )));
        }
        let mut out = bilinear_resize(&self.slots[x], out_h, out_w);
        out.requires_grad = self.slots[x].requires_grad;
        Ok(self.push(out, Op::Upsample { x }))
    }

    pub fn maxpool2(&mut self, x: VarId) -> Result<VarId> {
        self.check(x)?;
        let s = self.slots[x].shape;
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::Config(format!(
                "maxpool2 requires even spatial dims, got {}x{}",
                s.h, s.w
            )));
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        let mut argmax = vec![0u32; out.numel()];
        {
            let src = &self.slots[x].data;
            let mut oi = 0;
            for n in 0..s.n {
                for c in 0..s.c {
                    let plane = (n * s.c + c) * s.h * s.w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_idx = plane + (2 * oy) * s.w + 2 * ox;
                            let mut best = src[best_idx];
                            // row-major scan; strict > keeps the first max on ties
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = plane + (2 * oy + dy) * s.w + 2 * ox + dx;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                            out.data[oi] = best;
                            argmax[oi] = best_idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        out.requires_grad = self.slots[x].requires_grad;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: VarId) -> Result<VarId> {
        self.check(x)?;
        let s = self.slots[x].shape;
        let out = match kind {
            ReduceKind::GlobalAvgPool => {
                let hw = s.h * s.w;
                let inv = E::ONE / E::from_f64(hw as f64);
                let mut t = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * hw;
                        let mut acc = E::ZERO;
                        for &v in &self.slots[x].data[base..base + hw] {
                            acc += v;
                        }
                        t.data[n * s.c + c] = acc * inv;
                    }
                }
                t
            }
            ReduceKind::Sum => {
                let mut acc = E::ZERO;
                for &v in &self.slots[x].data {
                    acc += v;
                }
                Tensor::scalar(acc)
            }
        };
        let mut out = out;
        out.requires_grad = self.slots[x].requires_grad;
        Ok(self.push(out, Op::Reduce { kind, x }))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        self.reduce(ReduceKind::GlobalAvgPool, x)
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        self.reduce(ReduceKind::Sum, x)
    }

    pub fn scale(&mut self, x: VarId, k: E) -> Result<VarId> {
        self.check(x)?;
        let src = &self.slots[x];
        let mut out = Tensor::new(src.shape, src.data.iter().map(|&v| v * k).collect());
        out.requires_grad = src.requires_grad;
        Ok(self.push(out, Op::Scale { x, k }))
    }

    pub fn offset(&mut self, x: VarId, k: E) -> Result<VarId> {
        self.check(x)?;
        let src = &self.slots[x];
        let mut out = Tensor::new(src.shape, src.data.iter().map(|&v| v + k).collect());
        out.requires_grad = src.requires_grad;
        Ok(self.push(out, Op::Offset { x }))
    }

    /// Record a scalar-valued function of one input with a precomputed local
    /// gradient. Loss functions use this to join the tape.
    pub fn custom_scalar(&mut self, x: VarId, value: E, dloss_dx: Vec<E>) -> Result<VarId> {
        self.check(x)?;
        if dloss_dx.len() != self.slots[x].numel() {
            return Err(Error::Tape(format!(
                "custom scalar gradient length {} does not match input {}",
                dloss_dx.len(),
                self.slots[x].numel()
            )));
        }
        let mut out = Tensor::scalar(value);
        out.requires_grad = self.slots[x].requires_grad;
        Ok(self.push(out, Op::CustomScalar { x, dloss_dx }))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-accumulate gradients of a scalar loss into every slot that
    /// requires them. Errors on non-scalar losses and on repeat calls.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::Tape("backward called twice on one tape".into()));
        }
        if self.slots[loss].numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {}",
                self.slots[loss].shape
            )));
        }
        self.backward_done = true;
        self.grads[loss] = Some(vec![E::ONE]);

        for i in (0..=loss).rev() {
            if !self.slots[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.dispatch_backward(i, &g)?;
            self.grads[i] = Some(g);
        }

        // Unused-but-bound parameters read back as zero gradients.
        let ids: Vec<VarId> = self.bindings.values().copied().collect();
        for id in ids {
            if self.grads[id].is_none() {
                self.grads[id] = Some(vec![E::ZERO; self.slots[id].numel()]);
            }
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, out: VarId, g: &[E]) -> Result<()> {
        // slots/ops are read, grads are written: disjoint fields, so
        // destructure once and let the borrows split.
        let Tape {
            slots, ops, grads, ..
        } = self;
        // Grad buffers are taken out and put back so that aliased inputs
        // (e.g. mul(x, x)) accumulate sequentially instead of clobbering.
        let take = |grads: &mut Vec<Option<Vec<E>>>, id: VarId| -> Vec<E> {
            grads[id]
                .take()
                .unwrap_or_else(|| vec![E::ZERO; slots[id].numel()])
        };
        match &ops[out] {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, ref spec } => {
                let need_x = slots[x].requires_grad;
                let need_w = slots[w].requires_grad;
                let need_b = b.map(|b| slots[b].requires_grad).unwrap_or(false);
                let mut gx = need_x.then(|| take(grads, x));
                let mut gw = need_w.then(|| take(grads, w));
                let mut gb = need_b.then(|| take(grads, b.unwrap()));
                conv2d_backward(spec, &slots[x], &slots[w], g, gx.as_mut(), gw.as_mut(), gb.as_mut());
                if let Some(v) = gx {
                    grads[x] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w] = Some(v);
                }
                if let Some(v) = gb.take() {
                    grads[b.unwrap()] = Some(v);
                }
            }
            &Op::Pointwise { kind, x } => {
                if slots[x].requires_grad {
                    let mut gx = take(grads, x);
                    match kind {
                        PointwiseKind::Sigmoid => {
                            let y = &slots[out].data;
                            for i in 0..gx.len() {
                                gx[i] += g[i] * y[i] * (E::ONE - y[i]);
                            }
                        }
                        PointwiseKind::Tanh => {
                            let y = &slots[out].data;
                            for i in 0..gx.len() {
                                gx[i] += g[i] * (E::ONE - y[i] * y[i]);
                            }
                        }
                        PointwiseKind::Relu => {
                            let xv = &slots[x].data;
                            for i in 0..gx.len() {
                                if xv[i] > E::ZERO {
                                    gx[i] += g[i];
                                }
                            }
                        }
                    }
                    grads[x] = Some(gx);
                }
            }
            &Op::Elementwise { kind, a, b, bcast } => {
                let sa = slots[a].shape;
                let sb = slots[b].shape;
                if slots[a].requires_grad {
                    let mut ga = take(grads, a);
                    match kind {
                        EltKind::Add => {
                            for i in 0..ga.len() {
                                ga[i] += g[i];
                            }
                        }
                        EltKind::Mul => {
                            let bv = &slots[b].data;
                            for_each_bcast(sa, sb, bcast, |ai, bi| {
                                ga[ai] += g[ai] * bv[bi];
                            });
                        }
                    }
                    grads[a] = Some(ga);
                }
                if slots[b].requires_grad {
                    let mut gb = take(grads, b);
                    match kind {
                        EltKind::Add => {
                            for_each_bcast(sa, sb, bcast, |ai, bi| {
                                gb[bi] += g[ai];
                            });
                        }
                        EltKind::Mul => {
                            let av = &slots[a].data;
                            for_each_bcast(sa, sb, bcast, |ai, bi| {
                                gb[bi] += g[ai] * av[ai];
                            });
                        }
                    }
                    grads[b] = Some(gb);
                }
            }
            &Op::Upsample { x } => {
                if slots[x].requires_grad {
                    let mut gx = take(grads, x);
                    let out_shape = slots[out].shape;
                    bilinear_resize_backward(slots[x].shape, out_shape.h, out_shape.w, g, &mut gx);
                    grads[x] = Some(gx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                if slots[x].requires_grad {
                    let mut gx = take(grads, x);
                    for (oi, &src_idx) in argmax.iter().enumerate() {
                        gx[src_idx as usize] += g[oi];
                    }
                    grads[x] = Some(gx);
                }
            }
            &Op::Reduce { kind, x } => {
                if slots[x].requires_grad {
                    let mut gx = take(grads, x);
                    let s = slots[x].shape;
                    match kind {
                        ReduceKind::GlobalAvgPool => {
                            let hw = s.h * s.w;
                            let inv = E::ONE / E::from_f64(hw as f64);
                            for n in 0..s.n {
                                for c in 0..s.c {
                                    let up = g[n * s.c + c] * inv;
                                    let base = (n * s.c + c) * hw;
                                    for v in &mut gx[base..base + hw] {
                                        *v += up;
                                    }
                                }
                            }
                        }
                        ReduceKind::Sum => {
                            let up = g[0];
                            for v in gx.iter_mut() {
                                *v += up;
                            }
                        }
                    }
                    grads[x] = Some(gx);
                }
            }
            &Op::Scale { x, k } => {
                if slots[x].requires_grad {
                    let mut gx = take(grads, x);
                    for i in 0..gx.len() {
                        gx[i] += g[i] * k;
                    }
                    grads[x] = Some(gx);
                }
            }
            &Op::Offset { x } => {
                if slots[x].requires_grad {
                    let mut gx = take(grads, x);
                    for i in 0..gx.len() {
                        gx[i] += g[i];
                    }
                    grads[x] = Some(gx);
                }
            }
            Op::CustomScalar { x, dloss_dx } => {
                let x = *x;
                if slots[x].requires_grad {
                    let mut gx = take(grads, x);
                    let up = g[0];
                    for i in 0..gx.len() {
                        gx[i] += up * dloss_dx[i];
                    }
                    grads[x] = Some(gx);
                }
            }
        }
        Ok(())
    }
}

fn apply_broadcast<E: Scalar>(
    sa: Shape,
    sb: Shape,
    bcast: BroadcastKind,
    a: &[E],
    b: &[E],
    out: &mut [E],
    kind: EltKind,
) {
    match kind {
        EltKind::Add => for_each_bcast(sa, sb, bcast, |ai, bi| out[ai] = a[ai] + b[bi]),
        EltKind::Mul => for_each_bcast(sa, sb, bcast, |ai, bi| out[ai] = a[ai] * b[bi]),
    }
}

/// Visit every (a index, b index) pair of a broadcast elementwise op.
fn for_each_bcast(sa: Shape, sb: Shape, bcast: BroadcastKind, mut f: impl FnMut(usize, usize)) {
    let hw = sa.h * sa.w;
    match bcast {
        BroadcastKind::Same => {
            for i in 0..sa.numel() {
                f(i, i);
            }
        }
        BroadcastKind::PerChannel => {
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let base = (n * sa.c + c) * hw;
                    for i in base..base + hw {
                        f(i, c);
                    }
                }
            }
        }
        BroadcastKind::PerPixel => {
            for n in 0..sa.n {
                for c in 0..sa.c {
                    let base = (n * sa.c + c) * hw;
                    for j in 0..hw {
                        f(base + j, j);
                    }
                }
            }
        }
        BroadcastKind::PerImage => {
            let img = sb.numel();
            for n in 0..sa.n {
                let base = n * img;
                for j in 0..img {
                    f(base + j, j);
                }
            }
        }
    }
}
