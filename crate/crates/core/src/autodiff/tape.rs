//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its output value. A node
//! `requires_grad` when any input does; parameter leaves require grad only
//! when trainable. `backward` walks nodes in exact reverse creation order
//! and executes only the gradient branches that lead to a trainable
//! parameter, so a frozen subgraph at the bottom of the network costs
//! nothing on the way back.

use crate::autodiff::kernels::{self, ConvGeom, RoiRef};
use crate::autodiff::params::{BufferId, ParamId, ParamStore, Partition};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization behaviour of `batch_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and emit a running-stat update.
    TrainStats,
    /// Normalize with stored running statistics; never mutates them.
    FrozenStats,
}

#[derive(Debug, Clone)]
enum Op<T: Float> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ConcatChannels(Vec<Var>),
    Softmax(Var),
    FlattenAnchors { x: Var, per_anchor: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    RoiAlign { feats: Vec<Var>, strides: Vec<usize>, rois: Vec<RoiRef>, pooled: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, row_weights: Vec<f64>, probs: Vec<T> },
    Focal { logits: Var, targets: Vec<usize>, gamma: f64, alpha: f64, norm: f64, probs: Vec<T> },
    SmoothL1 { pred: Var, target: Vec<T>, beta: f64, norm: f64 },
}

impl<T: Float> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool { .. } => "max_pool",
            Op::Upsample2x(_) => "upsample2x",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Softmax(_) => "softmax",
            Op::FlattenAnchors { .. } => "flatten_anchors",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::RoiAlign { .. } => "roi_align",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Focal { .. } => "focal",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

/// Static cost of one node: forward FLOPs and the FLOPs needed to produce
/// the gradient of each input, should that input require one.
#[derive(Debug, Clone, Default)]
pub struct NodeCost {
    pub forward: u64,
    pub input_grads: Vec<(Var, u64)>,
}

#[derive(Debug, Clone)]
struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: Partition,
    cost: NodeCost,
}

/// A pending running-statistics write produced by a `TrainStats` batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate<T: Float> {
    pub mean: BufferId,
    pub var: BufferId,
    pub new_mean: Tensor<T>,
    pub new_var: Tensor<T>,
}

/// Work actually executed by a backward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Non-leaf nodes whose backward rule ran.
    pub primitives: usize,
    /// Backward rules that produced a parameter gradient.
    pub weight_grad_primitives: usize,
    /// Backward FLOPs keyed by the partition that received the gradient.
    pub flops: [u64; 4],
}

/// Per-node summary used by the cost estimator.
#[derive(Debug, Clone)]
pub struct NodeProfile {
    pub name: &'static str,
    pub scope: Partition,
    /// Set on parameter leaves.
    pub param: Option<ParamId>,
    /// Whether the recorded tape needed a gradient here.
    pub requires_grad: bool,
    pub forward_flops: u64,
    pub output_bytes: u64,
    pub inputs: Vec<InputEdge>,
    /// Input-gradient cost of a batch norm had it used frozen statistics.
    pub frozen_stats_input_grad: Option<u64>,
}

/// One producer of a node, index into the profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputEdge {
    pub src: usize,
    /// FLOPs to produce the gradient of `src`.
    pub grad_flops: u64,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    scope: Partition,
    stat_updates: Vec<StatUpdate<T>>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::config(format!("{what}: shape {a:?} is incompatible with {b:?}"))
}

impl<T: Float> Tape<T> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::new(), grad_enabled, scope: Partition::Backbone, stat_updates: Vec::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Sets the partition new nodes are attributed to; returns the old one.
    pub fn set_scope(&mut self, scope: Partition) -> Partition {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.stat_updates.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], cost: NodeCost) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, scope: self.scope, cost });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Input, requires_grad: false, scope: self.scope, cost: NodeCost::default() });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.param(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: self.grad_enabled && p.trainable,
            scope: p.partition,
            cost: NodeCost::default(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(shape_err("conv2d input vs weight", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(shape_err("conv2d kernel exceeds padded input", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d bias", self.shape(b), &ws));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], out);
        let macs2 = 2 * geom.macs();
        let out_numel = value.numel() as u64;
        let mut input_grads = vec![(x, macs2), (w, macs2)];
        if let Some(b) = b {
            input_grads.push((b, out_numel));
        }
        let cost = NodeCost { forward: macs2, input_grads };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs, cost))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running: (BufferId, BufferId),
        mode: BnMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::config(format!("batch_norm expects NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let rm = &store.buffer(running.0).value;
        let rv = &store.buffer(running.1).value;
        for (what, s) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta)), ("running_mean", rm.shape()), ("running_var", rv.shape())] {
            if s != [c] {
                return Err(Error::config(format!("batch_norm {what} has shape {s:?}, expected [{c}]")));
            }
        }
        if eps <= 0.0 {
            return Err(Error::config("batch_norm eps must be > 0"));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::FrozenStats => (rm.data().iter().map(|v| v.to_f64()).collect(), rv.data().iter().map(|v| v.to_f64()).collect()),
            BnMode::TrainStats => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            s += v.to_f64();
                        }
                    }
                    let mu = s / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            let d = v.to_f64() - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let mu = T::from_f64(mean[ch]);
                let is = inv_std[ch];
                let (g, bb) = (gd[ch], bd[ch]);
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + bb;
                }
            }
        }
        let numel = xd.len() as u64;
        let mut update = None;
        if mode == BnMode::TrainStats && self.grad_enabled {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let new_mean = rm.data().iter().zip(&mean).map(|(&r, &b)| T::from_f64((1.0 - momentum) * r.to_f64() + momentum * b)).collect();
            let new_var = rv.data().iter().zip(&var).map(|(&r, &b)| T::from_f64((1.0 - momentum) * r.to_f64() + momentum * b * unbias)).collect();
            update = Some(StatUpdate {
                mean: running.0,
                var: running.1,
                new_mean: Tensor::from_parts(vec![c], new_mean),
                new_var: Tensor::from_parts(vec![c], new_var),
            });
        }
        self.stat_updates.extend(update);
        let batch_stats = mode == BnMode::TrainStats;
        let cost = NodeCost { forward: 2 * numel, input_grads: vec![(x, if batch_stats { 5 * numel } else { numel }), (gamma, 2 * numel), (beta, numel)] };
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta], cost))
    }

    fn unary_cost(&self, x: Var, fwd_per: u64, bwd_per: u64) -> NodeCost {
        let n = self.value(x).numel() as u64;
        NodeCost { forward: fwd_per * n, input_grads: vec![(x, bwd_per * n)] }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let cost = self.unary_cost(x, 1, 1);
        self.push(value, Op::Relu(x), &[x], cost)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let cost = self.unary_cost(x, 4, 2);
        self.push(value, Op::Sigmoid(x), &[x], cost)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || stride == 0 || k == 0 || pad >= k || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::config(format!("max_pool2d k={k} s={stride} p={pad} invalid for {xs:?}")));
        }
        let (out, argmax, ho, wo) = kernels::max_pool_forward(self.value(x).data(), (xs[0], xs[1], xs[2], xs[3]), k, stride, pad);
        let value = Tensor::from_parts(vec![xs[0], xs[1], ho, wo], out);
        let on = value.numel() as u64;
        let cost = NodeCost { forward: on * (k * k) as u64, input_grads: vec![(x, on)] };
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x], cost))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::config(format!("upsample expects NCHW input, got {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![xs[0], xs[1], 2 * h, 2 * w], out);
        let on = value.numel() as u64;
        let cost = NodeCost { forward: on, input_grads: vec![(x, on)] };
        Ok(self.push(value, Op::Upsample2x(x), &[x], cost))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::config(format!("global_avg_pool expects NCHW input, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|c| {
                let mut s = T::zero();
                for &v in c {
                    s += v;
                }
                s * inv
            })
            .collect();
        let value = Tensor::from_parts(vec![xs[0], xs[1]], out);
        let cost = self.unary_cost(x, 1, 1);
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x], cost))
    }

    /// `x[N, in] · wᵀ + b` with `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear input vs weight", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("linear bias", self.shape(b), &ws));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let flops = 2 * (n * din * dout) as u64;
        let mut input_grads = vec![(x, flops), (w, flops)];
        if let Some(b) = b {
            input_grads.push((b, (n * dout) as u64));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::from_parts(vec![n, dout], out);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs, NodeCost { forward: flops, input_grads }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let n = value.numel() as u64;
        let cost = NodeCost { forward: n, input_grads: vec![(a, 0), (b, 0)] };
        Ok(self.push(value, Op::Add(a, b), &[a, b], cost))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let n = value.numel() as u64;
        let cost = NodeCost { forward: n, input_grads: vec![(a, n), (b, n)] };
        Ok(self.push(value, Op::Mul(a, b), &[a, b], cost))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let value = self.value(x).map(|v| v * cc);
        let cost = self.unary_cost(x, 1, 1);
        self.push(value, Op::Scale(x, c), &[x], cost)
    }

    /// Sum of all entries into a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let cost = self.unary_cost(x, 1, 1);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], cost)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::config("concat_channels expects NCHW inputs"));
        }
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(shape_err("concat_channels", s, &first));
            }
            c_total += s[1];
        }
        let (n, hw) = (first[0], first[2] * first[3]);
        let mut out = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, c_total, first[2], first[3]], out);
        let input_grads = parts.iter().map(|&p| (p, self.value(p).numel() as u64)).collect();
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), parts, NodeCost { forward: 0, input_grads }))
    }

    /// Row-wise softmax of a 2-d tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::config(format!("softmax expects [rows, classes], got {xs:?}")));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(xs[1]) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(xs, out);
        let cost = self.unary_cost(x, 5, 4);
        Ok(self.push(value, Op::Softmax(x), &[x], cost))
    }

    /// `[N, A·k, H, W]` → `[N·H·W·A, k]`, row order (n, y, x, a).
    pub fn flatten_anchors(&mut self, x: Var, per_anchor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || per_anchor == 0 || !xs[1].is_multiple_of(per_anchor) {
            return Err(Error::config(format!("flatten_anchors: {xs:?} not divisible into {per_anchor}-wide rows")));
        }
        let (n, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let a = ch / per_anchor;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for c in 0..ch {
                let (ai, j) = (c / per_anchor, c % per_anchor);
                for y in 0..h {
                    for xx in 0..w {
                        let row = ((b * h + y) * w + xx) * a + ai;
                        out[row * per_anchor + j] = src[((b * ch + c) * h + y) * w + xx];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n * h * w * a, per_anchor], out);
        let cost = NodeCost { forward: 0, input_grads: vec![(x, 0)] };
        Ok(self.push(value, Op::FlattenAnchors { x, per_anchor }, &[x], cost))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err("concat_rows", s, &[rows, cols]));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        let input_grads = parts.iter().map(|&p| (p, 0)).collect();
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts, NodeCost { forward: 0, input_grads }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::config(format!("gather_rows expects a 2-d tensor, got {xs:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs[0]) {
            return Err(Error::contract(format!("gather_rows index {bad} out of range for {} rows", xs[0])));
        }
        let cols = xs[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::from_parts(vec![idx.len(), cols], out);
        let n = value.numel() as u64;
        let cost = NodeCost { forward: 0, input_grads: vec![(x, n)] };
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x], cost))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        let cost = NodeCost { forward: 0, input_grads: vec![(x, 0)] };
        Ok(self.push(value, Op::Reshape(x), &[x], cost))
    }

    /// Bilinear region pooling over a feature pyramid: `[R, C, P, P]`.
    pub fn roi_align(&mut self, feats: &[Var], strides: &[usize], rois: &[RoiRef], pooled: usize) -> Result<Var> {
        if feats.is_empty() || feats.len() != strides.len() || pooled == 0 {
            return Err(Error::config("roi_align needs one stride per feature level"));
        }
        let s0 = self.shape(feats[0]).to_vec();
        if s0.len() != 4 {
            return Err(Error::config("roi_align expects NCHW features"));
        }
        let (n, c) = (s0[0], s0[1]);
        for &f in feats {
            let s = self.shape(f);
            if s.len() != 4 || s[0] != n || s[1] != c {
                return Err(shape_err("roi_align level", s, &s0));
            }
        }
        let bins = pooled * pooled;
        let mut out = vec![T::zero(); rois.len() * c * bins];
        for (r, roi) in rois.iter().enumerate() {
            if roi.level >= feats.len() || roi.batch >= n {
                return Err(Error::contract(format!("roi {r} references level {} / image {}", roi.level, roi.batch)));
            }
            let fs = self.shape(feats[roi.level]);
            let (h, w) = (fs[2], fs[3]);
            let fd = self.value(feats[roi.level]).data();
            let dst = &mut out[r * c * bins..(r + 1) * c * bins];
            kernels::roi_taps(roi, strides[roi.level], h, w, pooled, |bin, idx, wt| {
                let wt = T::from_f64(wt);
                for ch in 0..c {
                    dst[ch * bins + bin] += wt * fd[((roi.batch * c) + ch) * h * w + idx];
                }
            });
        }
        let value = Tensor::from_parts(vec![rois.len(), c, pooled, pooled], out);
        let taps = (rois.len() * c * bins * kernels::ROI_SAMPLES * kernels::ROI_SAMPLES * 4) as u64;
        let input_grads = feats.iter().map(|&f| (f, 2 * taps / feats.len() as u64)).collect();
        let cost = NodeCost { forward: 2 * taps, input_grads };
        let op = Op::RoiAlign { feats: feats.to_vec(), strides: strides.to_vec(), rois: rois.to_vec(), pooled };
        Ok(self.push(value, op, feats, cost))
    }

    /// Softmax cross-entropy over rows of `logits[M, C]`.
    ///
    /// With `class_weights`, row `i` contributes `w[y_i]·(−log p_{y_i})`.
    /// The sum is divided by `norm` (defaults to `M`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[f64]>, norm: Option<f64>) -> Result<Var> {
        let (m, c) = self.check_rows(logits, targets, "cross_entropy")?;
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::config(format!("class weight vector has {} entries for {c} classes", w.len())));
            }
            if w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::config("class weights must be strictly positive"));
            }
        }
        let norm = norm.unwrap_or(m.max(1) as f64);
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        let mut row_weights = Vec::with_capacity(m);
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            let y = targets[i];
            let wt = class_weights.map_or(1.0, |w| w[y]);
            total += wt * (lse - row[y].to_f64());
            row_weights.push(wt / norm);
            for v in row.iter_mut() {
                *v = T::from_f64((v.to_f64() - lse).exp());
            }
        }
        let cost = NodeCost { forward: 4 * (m * c) as u64, input_grads: vec![(logits, 2 * (m * c) as u64)] };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), row_weights, probs };
        Ok(self.push(Tensor::scalar(T::from_f64(total / norm)), op, &[logits], cost))
    }

    /// Softmax focal loss `−α (1 − p_y)^γ log p_y`, summed and divided by `norm`.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64, alpha: f64, norm: f64) -> Result<Var> {
        let (m, c) = self.check_rows(logits, targets, "focal_loss")?;
        if gamma < 0.0 || alpha <= 0.0 || norm <= 0.0 {
            return Err(Error::config("focal loss needs gamma >= 0, alpha > 0, norm > 0"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            let y = targets[i];
            let logp = row[y].to_f64() - lse;
            let p = logp.exp();
            total += -alpha * (1.0 - p).max(0.0).powf(gamma) * logp;
            for v in row.iter_mut() {
                *v = T::from_f64((v.to_f64() - lse).exp());
            }
        }
        let cost = NodeCost { forward: 6 * (m * c) as u64, input_grads: vec![(logits, 3 * (m * c) as u64)] };
        let op = Op::Focal { logits, targets: targets.to_vec(), gamma, alpha, norm, probs };
        Ok(self.push(Tensor::scalar(T::from_f64(total / norm)), op, &[logits], cost))
    }

    /// Smooth-L1 between `pred` and a constant `target` of equal shape.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, beta: f64, norm: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err("smooth_l1", self.shape(pred), target.shape()));
        }
        if beta <= 0.0 || norm <= 0.0 {
            return Err(Error::config("smooth_l1 needs beta > 0 and norm > 0"));
        }
        let mut total = 0.0;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = (p.to_f64() - t.to_f64()).abs();
            total += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        }
        let n = target.numel() as u64;
        let cost = NodeCost { forward: 3 * n, input_grads: vec![(pred, 2 * n)] };
        let op = Op::SmoothL1 { pred, target: target.data().to_vec(), beta, norm };
        Ok(self.push(Tensor::scalar(T::from_f64(total / norm)), op, &[pred], cost))
    }

    fn check_rows(&self, logits: Var, targets: &[usize], what: &str) -> Result<(usize, usize)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::config(format!("{what}: logits {s:?} vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(Error::contract(format!("{what}: target {bad} outside {} classes", s[1])));
        }
        Ok((s[0], s[1]))
    }

    /// Per-node cost summary for static estimation.
    pub fn profile(&self) -> Vec<NodeProfile> {
        self.nodes
            .iter()
            .map(|node| NodeProfile {
                name: node.op.name(),
                scope: node.scope,
                param: match node.op {
                    Op::Param(id) => Some(id),
                    _ => None,
                },
                requires_grad: node.requires_grad,
                forward_flops: node.cost.forward,
                output_bytes: (node.value.numel() * T::DTYPE.size_of()) as u64,
                inputs: node.cost.input_grads.iter().map(|&(v, f)| InputEdge { src: v.0, grad_flops: f }).collect(),
                frozen_stats_input_grad: match &node.op {
                    Op::BatchNorm { x, .. } => Some(self.nodes[x.0].value.numel() as u64),
                    _ => None,
                },
            })
            .collect()
    }

    /// Forward FLOPs recorded so far, per partition.
    pub fn forward_flops(&self) -> [u64; 4] {
        let mut out = [0u64; 4];
        for n in &self.nodes {
            out[n.scope.index()] += n.cost.forward;
        }
        out
    }

    /// Reverse pass from a 0-d `loss`, accumulating into trainable
    /// parameters of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<BackwardStats> {
        if !self.value(loss).shape().is_empty() {
            return Err(Error::contract(format!("backward needs a 0-d loss, got shape {:?}", self.shape(loss))));
        }
        let mut stats = BackwardStats::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(stats);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.accumulate_grad(*id, &g)?,
                op => {
                    stats.primitives += 1;
                    let mut produced_weight = false;
                    for &(v, f) in &node.cost.input_grads {
                        let src = &self.nodes[v.0];
                        if src.requires_grad {
                            stats.flops[src.scope.index()] += f;
                            produced_weight |= matches!(src.op, Op::Param(_));
                        }
                    }
                    if produced_weight {
                        stats.weight_grad_primitives += 1;
                    }
                    self.backward_op(op, &node.value, &g, &mut grads);
                }
            }
        }
        Ok(stats)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.needs(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.needs(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut db = b.filter(|b| self.needs(*b)).map(|b| vec![T::zero(); self.value(b).numel()]);
                kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                self.accum_vec(grads, *x, dx);
                self.accum_vec(grads, *w, dw);
                if let Some(b) = b {
                    self.accum_vec(grads, *b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = out.nchw();
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] += gd[i];
                            sum_dy_xhat[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    self.accum(grads, *gamma, Tensor::from_parts(vec![c], sum_dy_xhat.clone()));
                }
                if self.needs(*beta) {
                    self.accum(grads, *beta, Tensor::from_parts(vec![c], sum_dy.clone()));
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats { k * (gd[i] - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / m) } else { k * gd[i] };
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
                }
            }
            Op::Relu(x) => {
                let data = gd.iter().zip(out.data()).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect();
                self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Sigmoid(x) => {
                let data = gd.iter().zip(out.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.shape(*x);
                let in_plane = xs[2] * xs[3];
                let (_, _, ho, wo) = out.nchw();
                let out_plane = ho * wo;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (o, (&gv, &a)) in gd.iter().zip(argmax).enumerate() {
                    dx[(o / out_plane) * in_plane + a as usize] += gv;
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(n, dout, din, gd, false, self.value(*w).data(), false, &mut dx, false);
                    self.accum(grads, *x, Tensor::from_parts(vec![n, din], dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(dout, n, din, gd, true, self.value(*x).data(), false, &mut dw, false);
                    self.accum(grads, *w, Tensor::from_parts(vec![dout, din], dw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks_exact(dout.max(1)) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accum(grads, b, Tensor::from_parts(vec![dout], db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                    self.accum(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(&g, &y)| g * y).collect();
                    self.accum(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(x, c) => {
                let c = T::from_f64(*c);
                self.accum(grads, *x, g.map(|v| v * c));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accum(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::ConcatChannels(parts) => {
                let (n, _, h, w) = out.nchw();
                let hw = h * w;
                let c_total = out.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * c_total + offset) * hw;
                            d.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        self.accum(grads, p, Tensor::from_parts(self.shape(p).to_vec(), d));
                    }
                    offset += c;
                }
            }
            Op::Softmax(x) => {
                let c = out.dim(1);
                let mut dx = vec![T::zero(); gd.len()];
                for ((dr, gr), yr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(out.data().chunks_exact(c)) {
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::FlattenAnchors { x, per_anchor } => {
                let xs = self.shape(*x);
                let (n, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let a = ch / per_anchor;
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for c in 0..ch {
                        let (ai, j) = (c / per_anchor, c % per_anchor);
                        for y in 0..h {
                            for xx in 0..w {
                                let row = ((b * h + y) * w + xx) * a + ai;
                                dx[((b * ch + c) * h + y) * w + xx] = gd[row * per_anchor + j];
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        self.accum(grads, p, Tensor::from_parts(self.shape(p).to_vec(), gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let xs = self.shape(*x);
                let cols = xs[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[i * cols + j] += gd[r * cols + j];
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec()));
            }
            Op::RoiAlign { feats, strides, rois, pooled } => {
                let c = out.dim(1);
                let bins = pooled * pooled;
                let mut dfeat: Vec<Option<Vec<T>>> = feats.iter().map(|&f| self.needs(f).then(|| vec![T::zero(); self.value(f).numel()])).collect();
                for (r, roi) in rois.iter().enumerate() {
                    let Some(df) = dfeat[roi.level].as_mut() else { continue };
                    let fs = self.shape(feats[roi.level]);
                    let (h, w) = (fs[2], fs[3]);
                    let src = &gd[r * c * bins..(r + 1) * c * bins];
                    kernels::roi_taps(roi, strides[roi.level], h, w, *pooled, |bin, idx, wt| {
                        let wt = T::from_f64(wt);
                        for ch in 0..c {
                            df[((roi.batch * c) + ch) * h * w + idx] += wt * src[ch * bins + bin];
                        }
                    });
                }
                for (&f, d) in feats.iter().zip(dfeat) {
                    self.accum_vec(grads, f, d);
                }
            }
            Op::CrossEntropy { logits, targets, row_weights, probs } => {
                let c = self.shape(*logits)[1];
                let g0 = gd[0];
                let mut dx = probs.clone();
                for (i, row) in dx.chunks_exact_mut(c).enumerate() {
                    row[targets[i]] -= T::one();
                    let k = g0 * T::from_f64(row_weights[i]);
                    row.iter_mut().for_each(|v| *v *= k);
                }
                self.accum(grads, *logits, Tensor::from_parts(self.shape(*logits).to_vec(), dx));
            }
            Op::Focal { logits, targets, gamma, alpha, norm, probs } => {
                let c = self.shape(*logits)[1];
                let g0 = gd[0].to_f64();
                let mut dx = vec![T::zero(); probs.len()];
                for (i, (dr, pr)) in dx.chunks_exact_mut(c).zip(probs.chunks_exact(c)).enumerate() {
                    let y = targets[i];
                    let p = pr[y].to_f64();
                    let q = (1.0 - p).max(0.0);
                    // d loss / d p, times p
                    // q^(γ−1)·log p → 0 as q → 0
                    let pow_m1 = if *gamma == 0.0 || q == 0.0 { 0.0 } else { q.powf(gamma - 1.0) };
                    let logp = p.max(f64::MIN_POSITIVE).ln();
                    let dldp_p = -alpha * (q.powf(*gamma) - gamma * pow_m1 * p * logp);
                    for (j, d) in dr.iter_mut().enumerate() {
                        let delta = if j == y { 1.0 } else { 0.0 };
                        *d = T::from_f64(g0 * dldp_p * (delta - pr[j].to_f64()) / norm);
                    }
                }
                self.accum(grads, *logits, Tensor::from_parts(self.shape(*logits).to_vec(), dx));
            }
            Op::SmoothL1 { pred, target, beta, norm } => {
                let g0 = gd[0].to_f64();
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d = p.to_f64() - t.to_f64();
                        let v = if d.abs() < *beta { d / beta } else { d.signum() };
                        T::from_f64(g0 * v / norm)
                    })
                    .collect();
                self.accum(grads, *pred, Tensor::from_parts(self.shape(*pred).to_vec(), dx));
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn accum_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Option<Vec<T>>) {
        if let Some(d) = d {
            self.accum(grads, v, Tensor::from_parts(self.shape(v).to_vec(), d));
        }
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    let x = v.to_f64();
    let y = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    T::from_f64(y)
}

fn log_sum_exp<T: Float>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v = T::from_f64((v.to_f64() - lse).exp());
    }
}
