//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape is a
//! valid topological order for backpropagation. Gradients of intermediate nodes are
//! released as soon as they have been propagated; only leaf gradients survive
//! [`Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Float, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Probability clamp inside the cross-entropy logarithms.
pub const BCE_CLAMP: f64 = 1e-7;
pub const JACCARD_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    MulMask {
        x: Var,
        m: Var,
    },
    WeightedBce {
        p: Var,
        target: Vec<T>,
        valid: Option<Vec<bool>>,
        pos_weight: f64,
        count: usize,
    },
    SoftJaccard {
        p: Var,
        target: Vec<T>,
        valid: Option<Vec<bool>>,
        inter: f64,
        union: f64,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MaxPool { x, .. }
            | Op::Upsample { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Dropout { x, .. }
            | Op::Slice { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::Concat { a, b } => vec![*a, *b],
            Op::MulMask { x, m } => vec![*x, *m],
            Op::WeightedBce { p, .. } | Op::SoftJaccard { p, .. } => vec![*p],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(NnError::NonFinite(name));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same-padded cross-correlation for odd kernels (`pad = k / 2`) unless `pad` is given.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Option<usize>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws.c() != xs.c() || ws.h() != ws.w() {
            return Err(shape_err(format!("conv2d: input {xs} incompatible with kernel {ws}")));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs.numel() != ws.n() {
                return Err(shape_err(format!("conv2d: bias {bs} for {} output channels", ws.n())));
            }
        }
        let k = ws.h();
        let pad = pad.unwrap_or(k / 2);
        let geom = ConvGeom::new(xs.c(), xs.h(), xs.w(), k, pad, stride)
            .ok_or_else(|| shape_err(format!("conv2d: kernel {k} stride {stride} does not fit {xs}")))?;
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        self.push_op("conv2d", out, Op::Conv2d { x, w, b, geom })
    }

    /// Per-channel batch normalization. In training mode the batch statistics are used
    /// and the running statistics are updated in place; in eval mode the running
    /// statistics are used.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.value(x).shape();
        let c = xs.c();
        for (name, t) in [
            ("gamma", self.value(gamma).shape()),
            ("beta", self.value(beta).shape()),
            ("running mean", running_mean.shape()),
            ("running var", running_var.shape()),
        ] {
            if t.numel() != c {
                return Err(shape_err(format!("batchnorm2d: {name} {t} for {c} channels")));
            }
        }
        let (mean, inv_std, batch_stats): (Vec<f64>, Vec<f64>, bool) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(x));
                let m = (xs.n() * xs.plane()) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut running_mean.data_mut()[ch];
                    *rm = T::from_f64_lossy(BN_MOMENTUM * rm.as_f64() + (1.0 - BN_MOMENTUM) * mean[ch]);
                    let rv = &mut running_var.data_mut()[ch];
                    *rv = T::from_f64_lossy(BN_MOMENTUM * rv.as_f64() + (1.0 - BN_MOMENTUM) * var[ch] * unbias);
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv_std, true)
            }
            Mode::Eval => (
                running_mean.data().iter().map(|v| v.as_f64()).collect(),
                running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt())
                    .collect(),
                false,
            ),
        };
        let out = kernels::bn_apply(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &inv_std,
        );
        self.push_op(
            "batchnorm2d",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn maxpool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.h() % 2 != 0 || s.w() % 2 != 0 {
            return Err(shape_err(format!("maxpool2x: odd spatial extent {s}")));
        }
        let (out, argmax) = kernels::maxpool2x(self.value(x));
        self.push_op("maxpool2x", out, Op::MaxPool { x, argmax })
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2x(self.value(x));
        self.push_op("upsample2x", out, Op::Upsample { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.push_op("relu", out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
        self.push_op("sigmoid", out, Op::Sigmoid { x })
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push_op("dropout", out, Op::Dropout { x, mask })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(shape_err(format!("concat_channels: {sa} vs {sb}")));
        }
        let shape = Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..sa.n() {
            data.extend_from_slice(self.value(a).sample(i));
            data.extend_from_slice(self.value(b).sample(i));
        }
        let out = Tensor::new(shape, data)?;
        self.push_op("concat_channels", out, Op::Concat { a, b })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if len == 0 || start + len > s.c() {
            return Err(shape_err(format!("slice_channels: [{start}, {}) of {s}", start + len)));
        }
        let shape = Shape::new(s.n(), len, s.h(), s.w());
        let plane = s.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..s.n() {
            data.extend_from_slice(&self.value(x).sample(i)[start * plane..(start + len) * plane]);
        }
        let out = Tensor::new(shape, data)?;
        self.push_op("slice_channels", out, Op::Slice { x, start })
    }

    /// Multiplies every channel of `x` by the single-channel `m`.
    pub fn mul_mask(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.value(x).shape(), self.value(m).shape());
        if sm.c() != 1 || sm.n() != sx.n() || sm.h() != sx.h() || sm.w() != sx.w() {
            return Err(shape_err(format!("mul_mask: {sx} by {sm}")));
        }
        let plane = sx.plane();
        let mut out = self.value(x).clone();
        let md = self.value(m).data();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let mm = &md[(k / sx.c()) * plane..][..plane];
            for (v, &w) in chunk.iter_mut().zip(mm) {
                *v *= w;
            }
        }
        self.push_op("mul_mask", out, Op::MulMask { x, m })
    }

    fn loss_inputs(&self, op: &str, p: Var, target: &Tensor<T>, valid: Option<&[bool]>) -> Result<()> {
        let sp = self.value(p).shape();
        if target.shape() != sp {
            return Err(shape_err(format!("{op}: prediction {sp} vs target {}", target.shape())));
        }
        if valid.is_some_and(|v| v.len() != sp.numel()) {
            return Err(shape_err(format!("{op}: validity mask length mismatch")));
        }
        Ok(())
    }

    /// Mean class-weighted binary cross-entropy over valid pixels. Zero when no
    /// pixel is valid.
    pub fn weighted_bce(&mut self, p: Var, target: &Tensor<T>, valid: Option<&[bool]>, pos_weight: f64) -> Result<Var> {
        self.loss_inputs("weighted_bce", p, target, valid)?;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (i, (&pv, &yv)) in self.value(p).data().iter().zip(target.data()).enumerate() {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            let pc = pv.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = yv.as_f64();
            sum -= pos_weight * y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        self.push_op(
            "weighted_bce",
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::WeightedBce {
                p,
                target: target.data().to_vec(),
                valid: valid.map(|v| v.to_vec()),
                pos_weight,
                count,
            },
        )
    }

    /// `1 - (I + 1) / (U + 1)` with soft intersection `I = sum(p y)` and union
    /// `U = sum(p) + sum(y) - I` over valid pixels.
    pub fn soft_jaccard(&mut self, p: Var, target: &Tensor<T>, valid: Option<&[bool]>) -> Result<Var> {
        self.loss_inputs("soft_jaccard", p, target, valid)?;
        let (mut inter, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
        for (i, (&pv, &yv)) in self.value(p).data().iter().zip(target.data()).enumerate() {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            inter += pv.as_f64() * yv.as_f64();
            sp += pv.as_f64();
            sy += yv.as_f64();
        }
        let union = sp + sy - inter;
        let loss = 1.0 - (inter + JACCARD_SMOOTH) / (union + JACCARD_SMOOTH);
        self.push_op(
            "soft_jaccard",
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::SoftJaccard {
                p,
                target: target.data().to_vec(),
                valid: valid.map(|v| v.to_vec()),
                inter,
                union,
            },
        )
    }

    /// Scalar `sum(w * x)` with constant weights; reduces any tensor to a loss.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(shape_err(format!(
                "weighted_sum: weights {} for {}",
                weights.shape(),
                self.value(x).shape()
            )));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        self.push_op(
            "weighted_sum",
            Tensor::scalar(T::from_f64_lossy(s)),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
        )
    }

    /// Backpropagates from a scalar node. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar {}",
                self.value(loss).shape()
            )));
        }
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.needs(loss) {
            return Ok(());
        }
        let seed = Tensor::scalar(T::one());
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            for (v, dv) in self.node_backward(i, &g)? {
                self.accumulate(v, dv);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn node_backward(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let g = kernels::conv2d_backward(self.value(*x), self.value(*w), dy, geom, want);
                out.extend(g.dx.map(|d| (*x, d)));
                out.extend(g.dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, g.db) {
                    let shape = self.value(*b).shape();
                    out.push((*b, Tensor::new(shape, db.into_data())?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let g = kernels::bn_backward(
                    self.value(*x),
                    self.value(*gamma).data(),
                    dy,
                    mean,
                    inv_std,
                    *batch_stats,
                );
                if self.needs(*x) {
                    out.push((*x, g.dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, Tensor::new(self.value(*gamma).shape(), g.dgamma)?));
                }
                if self.needs(*beta) {
                    out.push((*beta, Tensor::new(self.value(*beta).shape(), g.dbeta)?));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&a, &d) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[a as usize] += d;
                }
                out.push((*x, dx));
            }
            Op::Upsample { x } => {
                out.push((*x, kernels::upsample2x_backward(dy, self.value(*x).shape())));
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                out.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let mut dx = dy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::one() - y);
                }
                out.push((*x, dx));
            }
            Op::Dropout { x, mask } => {
                let mut dx = dy.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                out.push((*x, dx));
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (la, lb) = (sa.sample_len(), sb.sample_len());
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for chunk in dy.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                if self.needs(*a) {
                    out.push((*a, Tensor::new(sa, da)?));
                }
                if self.needs(*b) {
                    out.push((*b, Tensor::new(sb, db)?));
                }
            }
            Op::Slice { x, start } => {
                let sx = self.value(*x).shape();
                let plane = sx.plane();
                let len = node.value.shape().c();
                let mut dx = Tensor::zeros(sx);
                let sl = sx.sample_len();
                for (i, chunk) in dy.data().chunks(len * plane).enumerate() {
                    dx.data_mut()[i * sl + start * plane..][..len * plane].copy_from_slice(chunk);
                }
                out.push((*x, dx));
            }
            Op::MulMask { x, m } => {
                let sx = self.value(*x).shape();
                let plane = sx.plane();
                let md = self.value(*m).data();
                if self.needs(*x) {
                    let mut dx = dy.clone();
                    for (k, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let mm = &md[(k / sx.c()) * plane..][..plane];
                        for (d, &w) in chunk.iter_mut().zip(mm) {
                            *d *= w;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*m) {
                    let mut dm = Tensor::zeros(self.value(*m).shape());
                    let xd = self.value(*x).data();
                    for (k, (gchunk, xchunk)) in dy.data().chunks(plane).zip(xd.chunks(plane)).enumerate() {
                        let dst = &mut dm.data_mut()[(k / sx.c()) * plane..][..plane];
                        for ((d, &g), &xv) in dst.iter_mut().zip(gchunk).zip(xchunk) {
                            *d += g * xv;
                        }
                    }
                    out.push((*m, dm));
                }
            }
            Op::WeightedBce {
                p,
                target,
                valid,
                pos_weight,
                count,
            } => {
                let mut dp = Tensor::zeros(self.value(*p).shape());
                if *count > 0 {
                    let scale = dy.item().as_f64() / *count as f64;
                    for (i, (d, &pv)) in dp.data_mut().iter_mut().zip(self.value(*p).data()).enumerate() {
                        if valid.as_ref().is_some_and(|v| !v[i]) {
                            continue;
                        }
                        let pv = pv.as_f64();
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                            continue;
                        }
                        let y = target[i].as_f64();
                        let g = -(pos_weight * y / pv - (1.0 - y) / (1.0 - pv));
                        *d = T::from_f64_lossy(scale * g);
                    }
                }
                out.push((*p, dp));
            }
            Op::SoftJaccard {
                p,
                target,
                valid,
                inter,
                union,
            } => {
                let mut dp = Tensor::zeros(self.value(*p).shape());
                let u = union + JACCARD_SMOOTH;
                let num = inter + JACCARD_SMOOTH;
                let scale = dy.item().as_f64();
                for (i, d) in dp.data_mut().iter_mut().enumerate() {
                    if valid.as_ref().is_some_and(|v| !v[i]) {
                        continue;
                    }
                    let y = target[i].as_f64();
                    let g = -(y * u - num * (1.0 - y)) / (u * u);
                    *d = T::from_f64_lossy(scale * g);
                }
                out.push((*p, dp));
            }
            Op::WeightedSum { x, weights } => {
                let g = dy.item();
                let data = weights.iter().map(|&w| w * g).collect();
                out.push((*x, Tensor::new(self.value(*x).shape(), data)?));
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        Ok(out)
    }
}
