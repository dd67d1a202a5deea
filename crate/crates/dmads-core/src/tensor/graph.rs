//! Define-by-run computation graph (Wengert tape) over rank-4 tensors.
//!
//! Every operation executes eagerly and records a node; [`Graph::backward`]
//! replays the tape once in reverse, accumulating gradients additively into
//! per-node buffers. One graph serves one forward/backward pass and is
//! confined to a single thread of control.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::conv::{self, ConvSpec};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Operation label as recorded on the tape (for structural assertions).
pub type OpName = &'static str;

/// Interpolation mode for [`Graph::upsample2x`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

enum Op<T: Element> {
    Leaf,
    Conv2d { spec: ConvSpec },
    Relu,
    Sigmoid,
    Add,
    Mul,
    ChannelScale,
    ConcatChannels,
    SliceChannels { start: usize },
    Upsample2x { mode: UpsampleMode },
    GlobalAvgPool,
    SpaceToPatches { patch: usize },
    PatchesToSpace { patch: usize, orig: Shape },
    Sum,
    Scale { factor: T },
    BceWithLogits { target: Tensor<T> },
    SoftIouLoss { target: Tensor<T>, eps: T },
}

impl<T: Element> Op<T> {
    fn name(&self) -> OpName {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::ChannelScale => "channel_scale",
            Op::ConcatChannels => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Upsample2x { .. } => "upsample2x",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SpaceToPatches { .. } => "space_to_patches",
            Op::PatchesToSpace { .. } => "patches_to_space",
            Op::Sum => "sum",
            Op::Scale { .. } => "scale",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftIouLoss { .. } => "soft_iou_loss",
        }
    }
}

struct Node<T: Element> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradient buffers produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`, if that node tracked gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// One forward pass worth of tape. Not `Sync`; create one per pass.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    check_finite: bool,
    macs: Cell<u64>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            check_finite: false,
            macs: Cell::new(0),
        }
    }

    /// Like [`Graph::new`] but every op output is scanned for NaN/Inf and
    /// reported as a structured error. Debug aid; off by default.
    pub fn with_finite_checks() -> Self {
        Graph {
            check_finite: true,
            ..Self::new()
        }
    }

    /// Constant leaf; gradients are not tracked through it.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// Learnable leaf; [`Graph::backward`] will produce its gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Snapshot of a node's value (cheap: data is shared).
    pub fn value(&self, var: Var) -> Tensor<T> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes.borrow()[var.0].value.shape()
    }

    /// Names of all ops recorded so far, in execution order.
    pub fn op_names(&self) -> Vec<OpName> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    /// Total multiply-accumulates executed by convolutions on this tape.
    pub fn mac_count(&self) -> u64 {
        self.macs.get()
    }

    fn push(&self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Result<Var> {
        if self.check_finite && !value.is_all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push(op, inputs, value, requires))
    }

    // ---- forward ops -------------------------------------------------------

    /// 2-D convolution with zero padding. `weight` is `(out, in, kh, kw)`;
    /// `bias`, when present, is `(out, 1, 1, 1)`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.c != spec.in_channels {
            return Err(Error::DimMismatch {
                op: "conv2d",
                dimension: "input channels",
                expected: spec.in_channels,
                got: xs.c,
            });
        }
        if ws != spec.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                lhs: spec.weight_shape().to_string(),
                rhs: ws.to_string(),
            });
        }
        if spec.bias != bias.is_some() {
            return Err(Error::InvalidConfig {
                op: "conv2d",
                reason: format!(
                    "spec.bias is {} but a bias tensor was {}",
                    spec.bias,
                    if bias.is_some() { "given" } else { "not given" }
                ),
            });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::new(spec.out_channels, 1, 1, 1) {
                return Err(Error::DimMismatch {
                    op: "conv2d bias",
                    dimension: "out channels",
                    expected: spec.out_channels,
                    got: bs.numel(),
                });
            }
        }
        let (xv, wv) = (self.value(x), self.value(weight));
        let bv = bias.map(|b| self.value(b));
        let out = conv::conv2d_forward(&xv, &wv, bv.as_ref(), spec)?;
        self.macs
            .set(self.macs.get() + xs.n as u64 * spec.macs(xs.h, xs.w));
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.record(Op::Conv2d { spec: *spec }, inputs, out)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| {
            let v = xv.data()[i];
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        });
        self.record(Op::Relu, vec![x], out)
    }

    /// Numerically stable logistic sigmoid (split form for both signs).
    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| stable_sigmoid(xv.data()[i]));
        self.record(Op::Sigmoid, vec![x], out)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_string(),
                rhs: bv.shape().to_string(),
            });
        }
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] + bv.data()[i]);
        self.record(Op::Add, vec![a, b], out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_string(),
                rhs: bv.shape().to_string(),
            });
        }
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] * bv.data()[i]);
        self.record(Op::Mul, vec![a, b], out)
    }

    /// Broadcast a per-channel vector `s` of shape `N x C x 1 x 1` over `x`.
    pub fn channel_scale(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (xs, ss) = (xv.shape(), sv.shape());
        if ss.n != xs.n || ss.c != xs.c || ss.h != 1 || ss.w != 1 {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: xs.to_string(),
                rhs: ss.to_string(),
            });
        }
        let hw = xs.h * xs.w;
        let out = Tensor::from_fn(xs, |i| {
            let nc = i / hw;
            xv.data()[i] * sv.data()[nc]
        });
        self.record(Op::ChannelScale, vec![x, s], out)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let hw = sa.h * sa.w;
        let (pa, pb) = (sa.c * hw, sb.c * hw);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(&av.data()[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&bv.data()[n * pb..(n + 1) * pb]);
        }
        let out = Tensor::new(out_shape, data)?;
        self.record(Op::ConcatChannels, vec![a, b], out)
    }

    /// Keep channels `start .. start + len`.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if start + len > xs.c || len == 0 {
            return Err(Error::DimMismatch {
                op: "slice_channels",
                dimension: "channel range end",
                expected: xs.c,
                got: start + len,
            });
        }
        let hw = xs.h * xs.w;
        let out_shape = Shape::new(xs.n, len, xs.h, xs.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..xs.n {
            let base = (n * xs.c + start) * hw;
            data.extend_from_slice(&xv.data()[base..base + len * hw]);
        }
        let out = Tensor::new(out_shape, data)?;
        self.record(Op::SliceChannels { start }, vec![x], out)
    }

    /// Double both spatial dimensions.
    pub fn upsample2x(&self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.h < 1 || xs.w < 1 {
            return Err(Error::InvalidConfig {
                op: "upsample2x",
                reason: format!("input spatial size {}x{} must be >= 1", xs.h, xs.w),
            });
        }
        let os = Shape::new(xs.n, xs.c, 2 * xs.h, 2 * xs.w);
        let mut data = vec![T::zero(); os.numel()];
        match mode {
            UpsampleMode::Nearest => {
                for nc in 0..xs.n * xs.c {
                    let src = &xv.data()[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                    let dst = &mut data[nc * os.h * os.w..(nc + 1) * os.h * os.w];
                    for oy in 0..os.h {
                        for ox in 0..os.w {
                            dst[oy * os.w + ox] = src[(oy / 2) * xs.w + ox / 2];
                        }
                    }
                }
            }
            UpsampleMode::Bilinear => {
                let ty = linear_taps(xs.h);
                let tx = linear_taps(xs.w);
                for nc in 0..xs.n * xs.c {
                    let src = &xv.data()[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                    let dst = &mut data[nc * os.h * os.w..(nc + 1) * os.h * os.w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let v = T::from_f64(wy0 * wx0) * src[y0 * xs.w + x0]
                                + T::from_f64(wy0 * wx1) * src[y0 * xs.w + x1]
                                + T::from_f64(wy1 * wx0) * src[y1 * xs.w + x0]
                                + T::from_f64(wy1 * wx1) * src[y1 * xs.w + x1];
                            dst[oy * os.w + ox] = v;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(os, data)?;
        self.record(Op::Upsample2x { mode }, vec![x], out)
    }

    /// Spatial mean per channel: `N x C x H x W -> N x C x 1 x 1`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        let hw = xs.h * xs.w;
        let inv = T::from_f64(1.0 / hw as f64);
        let out = Tensor::from_fn(Shape::new(xs.n, xs.c, 1, 1), |nc| {
            let mut acc = T::zero();
            for &v in &xv.data()[nc * hw..(nc + 1) * hw] {
                acc += v;
            }
            acc * inv
        });
        self.record(Op::GlobalAvgPool, vec![x], out)
    }

    /// Cut the spatial plane into `patch x patch` tiles and stack them on the
    /// batch axis: `N x C x H x W -> (N * ceil(H/p) * ceil(W/p)) x C x p x p`.
    /// Ragged edges are zero-padded.
    pub fn space_to_patches(&self, x: Var, patch: usize) -> Result<Var> {
        if patch == 0 {
            return Err(Error::InvalidConfig {
                op: "space_to_patches",
                reason: "patch size must be >= 1".to_string(),
            });
        }
        let xv = self.value(x);
        let xs = xv.shape();
        let (nh, nw) = (xs.h.div_ceil(patch), xs.w.div_ceil(patch));
        let os = Shape::new(xs.n * nh * nw, xs.c, patch, patch);
        let mut data = vec![T::zero(); os.numel()];
        for n in 0..xs.n {
            for ph in 0..nh {
                for pw in 0..nw {
                    let b = (n * nh + ph) * nw + pw;
                    for c in 0..xs.c {
                        for y in 0..patch {
                            let iy = ph * patch + y;
                            if iy >= xs.h {
                                continue;
                            }
                            for x_ in 0..patch {
                                let ix = pw * patch + x_;
                                if ix >= xs.w {
                                    continue;
                                }
                                data[os.offset(b, c, y, x_)] =
                                    xv.data()[xs.offset(n, c, iy, ix)];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(os, data)?;
        self.record(Op::SpaceToPatches { patch }, vec![x], out)
    }

    /// Inverse of [`Graph::space_to_patches`]: reassemble tiles into the
    /// original `orig` spatial layout, dropping the zero-padded fringe.
    pub fn patches_to_space(&self, x: Var, patch: usize, orig: Shape) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        let (nh, nw) = (orig.h.div_ceil(patch), orig.w.div_ceil(patch));
        if xs.n != orig.n * nh * nw || xs.c != orig.c || xs.h != patch || xs.w != patch {
            return Err(Error::ShapeMismatch {
                op: "patches_to_space",
                lhs: format!("{} (tiles of {})", xs, orig),
                rhs: format!("{}x{}x{}x{}", orig.n * nh * nw, orig.c, patch, patch),
            });
        }
        let mut data = vec![T::zero(); orig.numel()];
        for n in 0..orig.n {
            for c in 0..orig.c {
                for h in 0..orig.h {
                    for w in 0..orig.w {
                        let b = (n * nh + h / patch) * nw + w / patch;
                        data[orig.offset(n, c, h, w)] =
                            xv.data()[xs.offset(b, c, h % patch, w % patch)];
                    }
                }
            }
        }
        let out = Tensor::new(orig, data)?;
        self.record(Op::PatchesToSpace { patch, orig }, vec![x], out)
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc += v;
        }
        self.record(Op::Sum, vec![x], Tensor::scalar(acc))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * factor);
        self.record(Op::Scale { factor }, vec![x], out)
    }

    /// Mean binary cross-entropy of logits against a `{0,1}` target, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_with_logits(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(logits);
        if xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: xv.shape().to_string(),
                rhs: target.shape().to_string(),
            });
        }
        let lo = T::from_f64(1e-7);
        let hi = T::one() - lo;
        let inv_m = T::from_f64(1.0 / xv.shape().numel() as f64);
        let mut acc = T::zero();
        for (&x, &g) in xv.data().iter().zip(target.data().iter()) {
            let p = stable_sigmoid(x).max(lo).min(hi);
            acc += -(g * p.ln() + (T::one() - g) * (T::one() - p).ln());
        }
        let out = Tensor::scalar(acc * inv_m);
        self.record(
            Op::BceWithLogits {
                target: target.clone(),
            },
            vec![logits],
            out,
        )
    }

    /// Soft-IoU loss of logits against a `{0,1}` target:
    /// `1 - (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps)`.
    pub fn soft_iou_loss(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(logits);
        if xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "soft_iou_loss",
                lhs: xv.shape().to_string(),
                rhs: target.shape().to_string(),
            });
        }
        let eps = T::from_f64(1e-6);
        let (inter, union) = soft_iou_terms(xv.data(), target.data());
        let loss = T::one() - (inter + eps) / (union + eps);
        self.record(
            Op::SoftIouLoss {
                target: target.clone(),
                eps,
            },
            vec![logits],
            Tensor::scalar(loss),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits each tape node exactly once
    /// after all its consumers; gradients accumulate additively when a node
    /// feeds several consumers. A graph supports exactly one backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if !loss_shape.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_shape.to_string(),
            });
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                self.backprop_node(&nodes, node, &gy, &mut grads);
            }
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                grads[id] = Some(gy);
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(nodes[id].value.shape(), data).expect("grad shape matches value")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(
        &self,
        nodes: &[Node<T>],
        node: &Node<T>,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let arg = |i: usize| -> &Tensor<T> { &nodes[node.inputs[i].0].value };
        let needs = |i: usize| nodes[node.inputs[i].0].requires_grad;
        macro_rules! acc {
            ($i:expr) => {
                grads[node.inputs[$i].0]
                    .get_or_insert_with(|| vec![T::zero(); arg($i).shape().numel()])
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { spec } => {
                let gy_t = Tensor::new(node.value.shape(), gy.to_vec()).expect("shape");
                let (dx, dw, db) =
                    conv::conv2d_backward(arg(0), arg(1), spec.bias, spec, &gy_t);
                if needs(0) {
                    add_into(acc!(0), &dx);
                }
                if needs(1) {
                    add_into(acc!(1), &dw);
                }
                if let Some(db) = db {
                    if node.inputs.len() > 2 && needs(2) {
                        add_into(acc!(2), &db);
                    }
                }
            }
            Op::Relu => {
                if needs(0) {
                    let x = arg(0);
                    let dst = acc!(0);
                    for (i, &g) in gy.iter().enumerate() {
                        if x.data()[i] > T::zero() {
                            dst[i] += g;
                        }
                    }
                }
            }
            Op::Sigmoid => {
                if needs(0) {
                    let s = &node.value;
                    let dst = acc!(0);
                    for (i, &g) in gy.iter().enumerate() {
                        let sv = s.data()[i];
                        dst[i] += g * sv * (T::one() - sv);
                    }
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if needs(i) {
                        add_into(acc!(i), gy);
                    }
                }
            }
            Op::Mul => {
                if needs(0) {
                    let b = arg(1).clone();
                    let dst = acc!(0);
                    for (i, &g) in gy.iter().enumerate() {
                        dst[i] += g * b.data()[i];
                    }
                }
                if needs(1) {
                    let a = arg(0).clone();
                    let dst = acc!(1);
                    for (i, &g) in gy.iter().enumerate() {
                        dst[i] += g * a.data()[i];
                    }
                }
            }
            Op::ChannelScale => {
                let xs = arg(0).shape();
                let hw = xs.h * xs.w;
                if needs(0) {
                    let s = arg(1).clone();
                    let dst = acc!(0);
                    for (i, &g) in gy.iter().enumerate() {
                        dst[i] += g * s.data()[i / hw];
                    }
                }
                if needs(1) {
                    let x = arg(0).clone();
                    let dst = acc!(1);
                    for nc in 0..xs.n * xs.c {
                        let mut acc = T::zero();
                        for j in nc * hw..(nc + 1) * hw {
                            acc += gy[j] * x.data()[j];
                        }
                        dst[nc] += acc;
                    }
                }
            }
            Op::ConcatChannels => {
                let (sa, sb) = (arg(0).shape(), arg(1).shape());
                let hw = sa.h * sa.w;
                let (pa, pb) = (sa.c * hw, sb.c * hw);
                if needs(0) {
                    let dst = acc!(0);
                    for n in 0..sa.n {
                        let src = &gy[n * (pa + pb)..n * (pa + pb) + pa];
                        add_into(&mut dst[n * pa..(n + 1) * pa], src);
                    }
                }
                if needs(1) {
                    let dst = acc!(1);
                    for n in 0..sa.n {
                        let src = &gy[n * (pa + pb) + pa..(n + 1) * (pa + pb)];
                        add_into(&mut dst[n * pb..(n + 1) * pb], src);
                    }
                }
            }
            Op::SliceChannels { start } => {
                if needs(0) {
                    let xs = arg(0).shape();
                    let os = node.value.shape();
                    let hw = xs.h * xs.w;
                    let dst = acc!(0);
                    for n in 0..xs.n {
                        let base = (n * xs.c + start) * hw;
                        let src = &gy[n * os.c * hw..(n + 1) * os.c * hw];
                        add_into(&mut dst[base..base + os.c * hw], src);
                    }
                }
            }
            Op::Upsample2x { mode } => {
                if needs(0) {
                    let xs = arg(0).shape();
                    let os = node.value.shape();
                    let dst = acc!(0);
                    match mode {
                        UpsampleMode::Nearest => {
                            for nc in 0..xs.n * xs.c {
                                let d = &mut dst[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                                let g = &gy[nc * os.h * os.w..(nc + 1) * os.h * os.w];
                                for oy in 0..os.h {
                                    for ox in 0..os.w {
                                        d[(oy / 2) * xs.w + ox / 2] += g[oy * os.w + ox];
                                    }
                                }
                            }
                        }
                        UpsampleMode::Bilinear => {
                            let ty = linear_taps(xs.h);
                            let tx = linear_taps(xs.w);
                            for nc in 0..xs.n * xs.c {
                                let d = &mut dst[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                                let g = &gy[nc * os.h * os.w..(nc + 1) * os.h * os.w];
                                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                        let gv = g[oy * os.w + ox];
                                        d[y0 * xs.w + x0] += T::from_f64(wy0 * wx0) * gv;
                                        d[y0 * xs.w + x1] += T::from_f64(wy0 * wx1) * gv;
                                        d[y1 * xs.w + x0] += T::from_f64(wy1 * wx0) * gv;
                                        d[y1 * xs.w + x1] += T::from_f64(wy1 * wx1) * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool => {
                if needs(0) {
                    let xs = arg(0).shape();
                    let hw = xs.h * xs.w;
                    let inv = T::from_f64(1.0 / hw as f64);
                    let dst = acc!(0);
                    for nc in 0..xs.n * xs.c {
                        let g = gy[nc] * inv;
                        for v in &mut dst[nc * hw..(nc + 1) * hw] {
                            *v += g;
                        }
                    }
                }
            }
            Op::SpaceToPatches { patch } => {
                if needs(0) {
                    let xs = arg(0).shape();
                    let os = node.value.shape();
                    let (nh, nw) = (xs.h.div_ceil(*patch), xs.w.div_ceil(*patch));
                    let dst = acc!(0);
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            for h in 0..xs.h {
                                for w in 0..xs.w {
                                    let b = (n * nh + h / patch) * nw + w / patch;
                                    dst[xs.offset(n, c, h, w)] +=
                                        gy[os.offset(b, c, h % patch, w % patch)];
                                }
                            }
                        }
                    }
                }
            }
            Op::PatchesToSpace { patch, orig } => {
                if needs(0) {
                    let xs = arg(0).shape();
                    let (nh, nw) = (orig.h.div_ceil(*patch), orig.w.div_ceil(*patch));
                    let dst = acc!(0);
                    for n in 0..orig.n {
                        for c in 0..orig.c {
                            for h in 0..orig.h {
                                for w in 0..orig.w {
                                    let b = (n * nh + h / patch) * nw + w / patch;
                                    dst[xs.offset(b, c, h % patch, w % patch)] +=
                                        gy[orig.offset(n, c, h, w)];
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum => {
                if needs(0) {
                    let g = gy[0];
                    for v in acc!(0).iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Scale { factor } => {
                if needs(0) {
                    let f = *factor;
                    let dst = acc!(0);
                    for (v, &g) in dst.iter_mut().zip(gy.iter()) {
                        *v += g * f;
                    }
                }
            }
            Op::BceWithLogits { target } => {
                if needs(0) {
                    let x = arg(0).clone();
                    let lo = T::from_f64(1e-7);
                    let hi = T::one() - lo;
                    let inv_m = T::from_f64(1.0 / x.shape().numel() as f64);
                    let g = gy[0];
                    let dst = acc!(0);
                    for (i, (&xi, &gt)) in
                        x.data().iter().zip(target.data().iter()).enumerate()
                    {
                        let p = stable_sigmoid(xi);
                        // dL/dx = p - g inside the clamp window, 0 outside.
                        if p > lo && p < hi {
                            dst[i] += g * inv_m * (p - gt);
                        }
                    }
                }
            }
            Op::SoftIouLoss { target, eps } => {
                if needs(0) {
                    let x = arg(0).clone();
                    let (inter, union) = soft_iou_terms(x.data(), target.data());
                    let denom = union + *eps;
                    let num = inter + *eps;
                    let g = gy[0];
                    let dst = acc!(0);
                    for (i, (&xi, &gt)) in
                        x.data().iter().zip(target.data().iter()).enumerate()
                    {
                        let p = stable_sigmoid(xi);
                        // d/dp of 1 - (I+eps)/(U+eps) with dI/dp = g, dU/dp = 1-g.
                        let dl_dp = -(gt * denom - num * (T::one() - gt)) / (denom * denom);
                        dst[i] += g * dl_dp * p * (T::one() - p);
                    }
                }
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn soft_iou_terms<T: Element>(logits: &[T], target: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut p_sum = T::zero();
    let mut g_sum = T::zero();
    for (&x, &g) in logits.iter().zip(target.iter()) {
        let p = stable_sigmoid(x);
        inter += p * g;
        p_sum += p;
        g_sum += g;
    }
    (inter, p_sum + g_sum - inter)
}

/// Source taps and weights for 2x linear interpolation along one axis: output
/// pixel `i` samples `(i + 0.5)/2 - 0.5` with edge clamping.
fn linear_taps(in_len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * in_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * 0.5 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = (floor.max(0.0) as usize).min(in_len - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}
