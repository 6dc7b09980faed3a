//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: the value is computed at call
//! time and the node remembers its inputs plus whatever the adjoint needs.
//! [`Graph::backward`] walks the tape once in reverse and returns plain
//! gradient tensors for every leaf that requires them.
//!
//! [`Graph::grad_graph`] instead records the adjoint computation itself as new
//! graph nodes, so the resulting gradients can be differentiated again (the
//! R1 penalty needs this). Only the linear and piecewise-linear ops used by
//! the discriminator support this mode; the rest return
//! [`Error::Unsupported`].

use std::sync::Arc;

use crate::error::{bail_shape, Error, Result};
use crate::kernels::{self, ConvGeom, GroupNormSaved};
use crate::tensor::Tensor;
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvInputGrad { dy: Var, w: Var, geom: ConvGeom },
    ConvWeightGrad { x: Var, dy: Var, geom: ConvGeom },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    ScaleRows(Var, Arc<Vec<f64>>),
    AddBc { x: Var, s: Var },
    MulBc { x: Var, s: Var },
    ChannelReduce(Var),
    ChannelBroadcast(Var),
    Silu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    GroupNorm(Var, Arc<GroupNormSaved>),
    Attention { q: Var, k: Var, v: Var, attn: Tensor },
    AvgPool2(Var),
    Upsample2(Var),
    Dwt(Var),
    Idwt(Var),
    Cat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Embed { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Expand(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, .. } => vec![*x, *w],
            ConvInputGrad { dy, w, .. } => vec![*dy, *w],
            ConvWeightGrad { x, dy, .. } => vec![*x, *dy],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddBc { x, s } | MulBc { x, s } => vec![*x, *s],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Cat(xs) => xs.clone(),
            Scale(a, _)
            | MulConst(a, _)
            | ScaleRows(a, _)
            | ChannelReduce(a)
            | ChannelBroadcast(a)
            | Silu(a)
            | LeakyRelu(a, _)
            | Tanh(a)
            | Softplus(a)
            | Abs(a)
            | GroupNorm(a, _)
            | AvgPool2(a)
            | Upsample2(a)
            | Dwt(a)
            | Idwt(a)
            | Reshape(a)
            | Sum(a)
            | Mean(a)
            | Expand(a) => vec![*a],
            Narrow { x, .. } | Embed { x, .. } => vec![*x],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Conv2d { .. } => "conv2d",
            ConvInputGrad { .. } => "conv2d_input_grad",
            ConvWeightGrad { .. } => "conv2d_weight_grad",
            MatMul { .. } => "matmul",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            MulConst(..) => "mul_const",
            ScaleRows(..) => "scale_rows",
            AddBc { .. } => "add_bc",
            MulBc { .. } => "mul_bc",
            ChannelReduce(_) => "channel_reduce",
            ChannelBroadcast(_) => "channel_broadcast",
            Silu(_) => "silu",
            LeakyRelu(..) => "leaky_relu",
            Tanh(_) => "tanh",
            Softplus(_) => "softplus",
            Abs(_) => "abs",
            GroupNorm(..) => "group_norm",
            Attention { .. } => "attention",
            AvgPool2(_) => "avg_pool2",
            Upsample2(_) => "upsample2",
            Dwt(_) => "dwt",
            Idwt(_) => "idwt",
            Cat(_) => "cat",
            Narrow { .. } => "narrow",
            Embed { .. } => "embed",
            Reshape(_) => "reshape",
            Sum(_) => "sum",
            Mean(_) => "mean",
            Expand(_) => "expand",
        }
    }
}

/// Every differentiable operation the graph records.
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_const",
    "scale_rows",
    "add_bc",
    "mul_bc",
    "channel_reduce",
    "channel_broadcast",
    "silu",
    "leaky_relu",
    "tanh",
    "softplus",
    "abs",
    "group_norm",
    "attention",
    "avg_pool2",
    "upsample2",
    "dwt",
    "idwt",
    "cat",
    "narrow",
    "embed",
    "reshape",
    "sum",
    "mean",
    "expand",
];

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
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

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that computes values but records nothing for differentiation.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Names of the operations recorded so far (differentiable nodes only).
    pub fn ops_used(&self) -> std::collections::BTreeSet<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name())
            .collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted (parameter or differentiated input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let rg = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if rg { op } else { Op::Leaf },
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- operations -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d(self.val(x), self.val(w), &geom)?;
        Ok(self.push(y, Op::Conv2d { x, w, geom }))
    }

    pub fn conv2d_input_grad(&mut self, dy: Var, w: Var, in_hw: (usize, usize), geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d_input_grad(self.val(dy), self.val(w), in_hw, &geom)?;
        Ok(self.push(y, Op::ConvInputGrad { dy, w, geom }))
    }

    pub fn conv2d_weight_grad(&mut self, x: Var, dy: Var, k: (usize, usize), geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d_weight_grad(self.val(x), self.val(dy), k.0, k.1, &geom)?;
        Ok(self.push(y, Op::ConvWeightGrad { x, dy, geom }))
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let y = kernels::matmul(self.val(a), self.val(b), ta, tb)?;
        Ok(self.push(y, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.val(a).add(self.val(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.val(a).sub(self.val(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.val(a).mul(self.val(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.val(a).scale(s);
        self.push(y, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let y = self.val(a).mul(&c)?;
        Ok(self.push(y, Op::MulConst(a, c)))
    }

    /// Multiplies sample `b` of the leading axis by `coeffs[b]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: &[f64]) -> Result<Var> {
        let y = scale_rows(self.val(a), coeffs)?;
        Ok(self.push(y, Op::ScaleRows(a, Arc::new(coeffs.to_vec()))))
    }

    /// `x + s` with `s` of shape `[C]` or `[B, C]` broadcast over the remaining axes.
    pub fn add_bc(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = kernels::channel_apply(self.val(x), self.val(s), |a, b| a + b)?;
        Ok(self.push(y, Op::AddBc { x, s }))
    }

    /// `x * s` with `s` of shape `[C]` or `[B, C]` broadcast over the remaining axes.
    pub fn mul_bc(&mut self, x: Var, s: Var) -> Result<Var> {
        let y = kernels::channel_apply(self.val(x), self.val(s), |a, b| a * b)?;
        Ok(self.push(y, Op::MulBc { x, s }))
    }

    /// Sums `[B, C, ...]` over every axis after the channel axis.
    pub fn spatial_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape();
        if s.len() < 2 {
            bail_shape!("spatial_sum needs rank >= 2, got {:?}", s);
        }
        let y = kernels::channel_reduce(self.val(x), &[s[0], s[1]])?;
        Ok(self.push(y, Op::ChannelReduce(x)))
    }

    /// Sums a `[B, C, ...]` tensor down to `target` (`[C]` or `[B, C]`).
    fn channel_reduce_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let y = kernels::channel_reduce(self.val(x), target)?;
        Ok(self.push(y, Op::ChannelReduce(x)))
    }

    fn channel_broadcast_to(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let y = kernels::channel_broadcast(self.val(s), shape)?;
        Ok(self.push(y, Op::ChannelBroadcast(s)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.val(a).map(|x| x * kernels::sigmoid(x));
        self.push(y, Op::Silu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let y = self.val(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(y, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.val(a).map(f64::tanh);
        self.push(y, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.val(a).map(kernels::softplus);
        self.push(y, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let y = self.val(a).map(f64::abs);
        self.push(y, Op::Abs(a))
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let saved = kernels::group_norm(self.val(x), groups, eps)?;
        let y = saved.xhat.clone();
        Ok(self.push(y, Op::GroupNorm(x, Arc::new(saved))))
    }

    /// Softmax attention over the token axis of `[B, C, N]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (y, attn) = kernels::attention(self.val(q), self.val(k), self.val(v))?;
        Ok(self.push(y, Op::Attention { q, k, v, attn }))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let y = kernels::avg_pool2(self.val(a))?;
        Ok(self.push(y, Op::AvgPool2(a)))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let y = kernels::upsample2(self.val(a))?;
        Ok(self.push(y, Op::Upsample2(a)))
    }

    /// Haar DWT in packed layout: `[B,C,H,W] -> [B,4C,H/2,W/2]`.
    pub fn dwt(&mut self, a: Var) -> Result<Var> {
        let y = wavelet::dwt_packed(self.val(a))?;
        Ok(self.push(y, Op::Dwt(a)))
    }

    /// Inverse of [`Graph::dwt`]: `[B,4C,H,W] -> [B,C,2H,2W]`.
    pub fn idwt(&mut self, a: Var) -> Result<Var> {
        let y = wavelet::idwt_packed(self.val(a))?;
        Ok(self.push(y, Op::Idwt(a)))
    }

    pub fn cat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|v| self.val(*v)).collect();
        let y = Tensor::cat_channels(&parts)?;
        Ok(self.push(y, Op::Cat(xs.to_vec())))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.val(x).narrow_channels(start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }))
    }

    /// Places `x` at channels `start..` of a zero tensor with `total` channels.
    pub fn embed_channels(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let (b, c, h, w) = self.val(x).dims4()?;
        if start + c > total {
            bail_shape!("embed {} channels at {} exceeds {}", c, start, total);
        }
        let mut parts = Vec::new();
        let lo = Tensor::zeros(&[b, start, h, w]);
        let hi = Tensor::zeros(&[b, total - start - c, h, w]);
        parts.push(&lo);
        parts.push(self.val(x));
        parts.push(&hi);
        let y = Tensor::cat_channels(&parts)?;
        Ok(self.push(y, Op::Embed { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.val(a).sum());
        self.push(y, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.val(a).mean());
        self.push(y, Op::Mean(a))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(a).item()?;
        Ok(self.push(Tensor::full(shape, v), Op::Expand(a)))
    }

    /// Dense layer `x·wᵀ + b` for `x [B,N]`, `w [M,N]`, `b [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false, true)?;
        match b {
            Some(b) => self.add_bc(y, b),
            None => Ok(y),
        }
    }

    // ---- first-order backward --------------------------------------------

    /// Reverse-mode gradients of the scalar `loss` for every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0];
        if lv.value.numel() != 1 {
            bail_shape!("backward needs a scalar loss, got shape {:?}", lv.value.shape());
        }
        if !lv.requires_grad {
            return Err(Error::InvalidArgument(
                "loss is detached from every leaf that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.vjp(i, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        use Op::*;
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Leaf => {}
            Conv2d { x, w, geom } => {
                let ws = self.val(*w).shape();
                if self.wants(*x) {
                    let (_, _, h, wd) = self.val(*x).dims4()?;
                    out.push((*x, kernels::conv2d_input_grad(g, self.val(*w), (h, wd), geom)?));
                }
                if self.wants(*w) {
                    out.push((*w, kernels::conv2d_weight_grad(self.val(*x), g, ws[2], ws[3], geom)?));
                }
            }
            ConvInputGrad { dy, w, geom, .. } => {
                if self.wants(*dy) {
                    out.push((*dy, kernels::conv2d(g, self.val(*w), geom)?));
                }
                if self.wants(*w) {
                    let ws = self.val(*w).shape();
                    out.push((*w, kernels::conv2d_weight_grad(g, self.val(*dy), ws[2], ws[3], geom)?));
                }
            }
            ConvWeightGrad { x, dy, geom, .. } => {
                if self.wants(*dy) {
                    out.push((*dy, kernels::conv2d(self.val(*x), g, geom)?));
                }
                if self.wants(*x) {
                    let (_, _, h, wd) = self.val(*x).dims4()?;
                    out.push((*x, kernels::conv2d_input_grad(self.val(*dy), g, (h, wd), geom)?));
                }
            }
            MatMul { a, b, ta, tb } => {
                if self.wants(*a) {
                    let ga = if *ta {
                        kernels::matmul(self.val(*b), g, *tb, true)?
                    } else {
                        kernels::matmul(g, self.val(*b), false, !*tb)?
                    };
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let gb = if *tb {
                        kernels::matmul(g, self.val(*a), true, *ta)?
                    } else {
                        kernels::matmul(self.val(*a), g, !*ta, false)?
                    };
                    out.push((*b, gb));
                }
            }
            Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.mul(self.val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, g.mul(self.val(*a))?));
                }
            }
            Scale(a, s) => out.push((*a, g.scale(*s))),
            MulConst(a, c) => out.push((*a, g.mul(c)?)),
            ScaleRows(a, c) => out.push((*a, scale_rows(g, c)?)),
            AddBc { x, s } => {
                out.push((*x, g.clone()));
                if self.wants(*s) {
                    out.push((*s, kernels::channel_reduce(g, self.val(*s).shape())?));
                }
            }
            MulBc { x, s } => {
                if self.wants(*x) {
                    out.push((*x, kernels::channel_apply(g, self.val(*s), |a, b| a * b)?));
                }
                if self.wants(*s) {
                    let gx = g.mul(self.val(*x))?;
                    out.push((*s, kernels::channel_reduce(&gx, self.val(*s).shape())?));
                }
            }
            ChannelReduce(x) => out.push((*x, kernels::channel_broadcast(g, self.val(*x).shape())?)),
            ChannelBroadcast(s) => out.push((*s, kernels::channel_reduce(g, self.val(*s).shape())?)),
            Silu(a) => {
                let d = self.val(*a).map(|x| {
                    let s = kernels::sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                out.push((*a, g.mul(&d)?));
            }
            LeakyRelu(a, slope) => {
                let d = leaky_mask(self.val(*a), *slope);
                out.push((*a, g.mul(&d)?));
            }
            Tanh(a) => {
                let d = node.value.map(|y| 1.0 - y * y);
                out.push((*a, g.mul(&d)?));
            }
            Softplus(a) => {
                let d = self.val(*a).map(kernels::sigmoid);
                out.push((*a, g.mul(&d)?));
            }
            Abs(a) => {
                let d = self.val(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                out.push((*a, g.mul(&d)?));
            }
            GroupNorm(x, saved) => out.push((*x, kernels::group_norm_backward(g, saved)?)),
            Attention { q, k, v, attn } => {
                let (dq, dk, dv) = kernels::attention_backward(g, self.val(*q), self.val(*k), self.val(*v), attn)?;
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            AvgPool2(a) => out.push((*a, kernels::upsample2(g)?.scale(0.25))),
            Upsample2(a) => out.push((*a, kernels::avg_pool2(g)?.scale(4.0))),
            Dwt(a) => out.push((*a, wavelet::idwt_packed(g)?)),
            Idwt(a) => out.push((*a, wavelet::dwt_packed(g)?)),
            Cat(xs) => {
                let mut start = 0;
                for x in xs {
                    let c = self.val(*x).shape()[1];
                    if self.wants(*x) {
                        out.push((*x, g.narrow_channels(start, c)?));
                    }
                    start += c;
                }
            }
            Narrow { x, start } => {
                let (b, c, h, w) = self.val(*x).dims4()?;
                let len = g.shape()[1];
                let lo = Tensor::zeros(&[b, *start, h, w]);
                let hi = Tensor::zeros(&[b, c - start - len, h, w]);
                out.push((*x, Tensor::cat_channels(&[&lo, g, &hi])?));
            }
            Embed { x, start } => {
                let c = self.val(*x).shape()[1];
                out.push((*x, g.narrow_channels(*start, c)?));
            }
            Reshape(x) => out.push((*x, g.reshape(self.val(*x).shape())?)),
            Sum(a) => out.push((*a, Tensor::full(self.val(*a).shape(), g.item()?))),
            Mean(a) => {
                let n = self.val(*a).numel() as f64;
                out.push((*a, Tensor::full(self.val(*a).shape(), g.item()? / n)));
            }
            Expand(a) => out.push((*a, Tensor::full(self.val(*a).shape(), g.sum()))),
        }
        out.retain(|(v, _)| self.wants(*v));
        Ok(out)
    }

    // ---- differentiable gradients ----------------------------------------

    /// Gradients of the scalar `output` with respect to `wrt`, recorded as
    /// graph nodes so they can be differentiated again.
    ///
    /// Only nodes that lie on a path from some `wrt` leaf to `output` are
    /// traversed. Leaves that do not reach `output` get a zero constant.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.nodes[output.0].value.numel() != 1 {
            bail_shape!("grad_graph needs a scalar output, got {:?}", self.shape(output));
        }
        if !self.grad_enabled {
            return Err(Error::InvalidArgument("grad_graph on an inference graph".into()));
        }
        let end = output.0 + 1;
        let mut depends = vec![false; end];
        for w in wrt {
            if w.0 < end {
                depends[w.0] = true;
            }
        }
        for i in 0..end {
            if !depends[i] {
                depends[i] = self.nodes[i].requires_grad && self.nodes[i].op.inputs().iter().any(|v| depends[v.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if depends[output.0] {
            let one = Tensor::full(self.shape(output), 1.0);
            grads[output.0] = Some(self.constant(one));
        }
        for i in (0..end).rev() {
            if !depends[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            for (input, gi) in self.vjp_graph(i, g, &depends)? {
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, gi)?,
                    None => gi,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect())
    }

    fn vjp_graph(&mut self, i: usize, g: Var, depends: &[bool]) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let op = self.nodes[i].op.clone();
        let on = |v: &Var| depends[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Conv2d { x, w, geom } => {
                if on(&x) {
                    let (_, _, h, wd) = self.val(x).dims4()?;
                    out.push((x, self.conv2d_input_grad(g, w, (h, wd), geom)?));
                }
                if on(&w) {
                    let ws = self.shape(w).to_vec();
                    out.push((w, self.conv2d_weight_grad(x, g, (ws[2], ws[3]), geom)?));
                }
            }
            ConvInputGrad { dy, w, geom, .. } => {
                if on(&dy) {
                    out.push((dy, self.conv2d(g, w, geom)?));
                }
                if on(&w) {
                    let ws = self.shape(w).to_vec();
                    out.push((w, self.conv2d_weight_grad(g, dy, (ws[2], ws[3]), geom)?));
                }
            }
            ConvWeightGrad { x, dy, geom, .. } => {
                if on(&dy) {
                    out.push((dy, self.conv2d(x, g, geom)?));
                }
                if on(&x) {
                    let (_, _, h, wd) = self.val(x).dims4()?;
                    out.push((x, self.conv2d_input_grad(dy, g, (h, wd), geom)?));
                }
            }
            MatMul { a, b, ta, tb } => {
                if on(&a) {
                    let ga = if ta {
                        self.matmul(b, g, tb, true)?
                    } else {
                        self.matmul(g, b, false, !tb)?
                    };
                    out.push((a, ga));
                }
                if on(&b) {
                    let gb = if tb {
                        self.matmul(g, a, true, ta)?
                    } else {
                        self.matmul(a, g, !ta, false)?
                    };
                    out.push((b, gb));
                }
            }
            Add(a, b) => {
                out.push((a, g));
                out.push((b, g));
            }
            Sub(a, b) => {
                out.push((a, g));
                if on(&b) {
                    out.push((b, self.scale(g, -1.0)));
                }
            }
            Mul(a, b) => {
                if on(&a) {
                    out.push((a, self.mul(g, b)?));
                }
                if on(&b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Scale(a, s) => out.push((a, self.scale(g, s))),
            MulConst(a, c) => out.push((a, self.mul_const(g, c)?)),
            ScaleRows(a, c) => out.push((a, self.scale_rows(g, &c)?)),
            AddBc { x, s } => {
                out.push((x, g));
                if on(&s) {
                    let target = self.shape(s).to_vec();
                    out.push((s, self.channel_reduce_to(g, &target)?));
                }
            }
            ChannelReduce(x) => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.channel_broadcast_to(g, &shape)?));
            }
            ChannelBroadcast(s) => {
                let target = self.shape(s).to_vec();
                out.push((s, self.channel_reduce_to(g, &target)?));
            }
            LeakyRelu(a, slope) => {
                let mask = leaky_mask(self.val(a), slope);
                out.push((a, self.mul_const(g, mask)?));
            }
            AvgPool2(a) => {
                let u = self.upsample2(g)?;
                out.push((a, self.scale(u, 0.25)));
            }
            Upsample2(a) => {
                let p = self.avg_pool2(g)?;
                out.push((a, self.scale(p, 4.0)));
            }
            Dwt(a) => out.push((a, self.idwt(g)?)),
            Idwt(a) => out.push((a, self.dwt(g)?)),
            Cat(xs) => {
                let mut start = 0;
                for x in xs {
                    let c = self.shape(x)[1];
                    if on(&x) {
                        out.push((x, self.narrow_channels(g, start, c)?));
                    }
                    start += c;
                }
            }
            Narrow { x, start } => {
                let total = self.shape(x)[1];
                out.push((x, self.embed_channels(g, start, total)?));
            }
            Embed { x, start } => {
                let c = self.shape(x)[1];
                out.push((x, self.narrow_channels(g, start, c)?));
            }
            Reshape(x) => {
                let s = self.shape(x).to_vec();
                out.push((x, self.reshape(g, &s)?));
            }
            Sum(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.expand(g, &s)?));
            }
            Mean(a) => {
                let s = self.shape(a).to_vec();
                let n = self.val(a).numel() as f64;
                let e = self.expand(g, &s)?;
                out.push((a, self.scale(e, 1.0 / n)));
            }
            Expand(a) => out.push((a, self.sum(g))),
            other => {
                return Err(Error::Unsupported(format!(
                    "higher-order gradient through {}",
                    other.name()
                )))
            }
        }
        out.retain(|(v, _)| depends[v.0]);
        Ok(out)
    }
}

fn leaky_mask(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { slope })
}

fn scale_rows(x: &Tensor, coeffs: &[f64]) -> Result<Tensor> {
    let b = x.shape().first().copied().unwrap_or(0);
    if coeffs.len() != b {
        bail_shape!("scale_rows: {} coefficients for leading extent {}", coeffs.len(), b);
    }
    let per = x.numel() / b.max(1);
    let mut out = x.data().to_vec();
    for (chunk, c) in out.chunks_mut(per.max(1)).zip(coeffs) {
        for v in chunk {
            *v *= c;
        }
    }
    Tensor::new(x.shape(), out)
}
