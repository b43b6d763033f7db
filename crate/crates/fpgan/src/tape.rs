//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] owns every intermediate value of one tracked computation.
//! Model parameters stay outside as [`Tensor`]s and are interned as leaves
//! (by [`LeafId`]) on first use; `backward` accumulates gradients into the
//! leaf nodes, from which they are read back per parameter. Intermediate
//! gradients live in scratch buffers local to each `backward` call, so
//! repeated backward calls accumulate on leaves only.
//!
//! Broadcasting is deliberately narrow: elementwise ops accept equal dims,
//! a per-channel vector `[C]` against a 4-D activation, or a per-sample
//! channel map `[N,C,1,1]` against `[N,C,H,W]` (the gating shape).

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{check_dims, numel, LeafId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    /// b has dims [C], broadcast over [N,C,H,W] along the channel axis.
    ChanVec,
    /// b has dims [N,C,1,1], broadcast over H and W.
    ChanMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKindOp {
    Standard,
    Depthwise,
    Pointwise,
}

/// Batch statistics returned by a training-mode batch norm so the caller can
/// update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Ewise {
        kind: EwiseKind,
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    },
    Affine {
        x: NodeId,
        mul: T,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Glu {
        x: NodeId,
    },
    Sum {
        x: NodeId,
        axes: Vec<usize>,
    },
    Mean {
        x: NodeId,
        axes: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    AvgPool {
        x: NodeId,
        block: usize,
    },
    Reshape {
        x: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Conv {
        kind: ConvKindOp,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
}

struct Node<T: Element> {
    dims: Vec<usize>,
    value: Vec<T>,
    /// Persistent leaf gradient; `None` for intermediates and untracked leaves.
    grad: Option<Vec<T>>,
    tracked: bool,
    op: Op<T>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<LeafId, NodeId>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let n = &self.nodes[id.0];
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got dims {:?}",
                n.dims
            )));
        }
        Ok(n.value[0])
    }

    /// Total bytes held by forward value buffers; used by memory estimation.
    pub fn activation_bytes(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| (n.value.len() * T::DTYPE.width()) as u64)
            .sum()
    }

    /// Copies a node's value out as a fresh untracked tensor.
    pub fn detach(&self, id: NodeId) -> Tensor<T> {
        Tensor::from_vec(&self.nodes[id.0].dims, self.nodes[id.0].value.clone())
            .expect("node dims are valid by construction")
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<T>, tracked: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(numel(&dims), value.len());
        self.nodes.push(Node {
            dims,
            value,
            grad: None,
            tracked,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    // -- leaves ------------------------------------------------------------

    /// Interns a tensor as a leaf; tracking follows `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.leaves.get(&t.id()) {
            return id;
        }
        let id = self.push(
            t.dims().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        );
        self.leaves.insert(t.id(), id);
        id
    }

    /// Interns a tensor as an untracked leaf regardless of `requires_grad`;
    /// used for frozen components and for parameters of the non-trained side.
    pub fn frozen(&mut self, t: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.leaves.get(&t.id()) {
            return id;
        }
        let id = self.push(t.dims().to_vec(), t.data().to_vec(), false, Op::Leaf);
        self.leaves.insert(t.id(), id);
        id
    }

    pub fn constant(&mut self, dims: &[usize], data: Vec<T>) -> Result<NodeId> {
        check_dims(dims)?;
        if numel(dims) != data.len() {
            return Err(Error::shape("constant data length mismatch"));
        }
        Ok(self.push(dims.to_vec(), data, false, Op::Leaf))
    }

    /// Accumulated gradient of a leaf tensor, if the tensor has been used on
    /// this tape, is tracked, and backward has run.
    pub fn leaf_grad(&self, t: &Tensor<T>) -> Option<&[T]> {
        let id = self.leaves.get(&t.id())?;
        self.nodes[id.0].grad.as_deref()
    }

    /// Adds this tape's accumulated leaf gradient into `t.grad`.
    pub fn export_grad(&self, t: &mut Tensor<T>) -> Result<()> {
        if let Some(&id) = self.leaves.get(&t.id()) {
            if let Some(g) = self.nodes[id.0].grad.as_deref() {
                t.accumulate_grad(g)?;
            } else if self.nodes[id.0].tracked {
                // Tracked but loss-independent: exactly zero gradient.
                t.accumulate_grad(&vec![T::zero(); t.numel()])?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // -- elementwise -------------------------------------------------------

    fn classify_bcast(&self, a: NodeId, b: NodeId) -> Result<Bcast> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da == db {
            return Ok(Bcast::None);
        }
        if da.len() == 4 && db.len() == 1 && db[0] == da[1] {
            return Ok(Bcast::ChanVec);
        }
        if da.len() == 4
            && db.len() == 4
            && db[0] == da[0]
            && db[1] == da[1]
            && db[2] == 1
            && db[3] == 1
        {
            return Ok(Bcast::ChanMap);
        }
        Err(Error::shape(format!(
            "incompatible elementwise dims {da:?} vs {db:?}"
        )))
    }

    pub fn ewise(&mut self, kind: EwiseKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bcast = self.classify_bcast(a, b)?;
        let dims = self.dims(a).to_vec();
        let n = numel(&dims);
        let mut out = vec![T::zero(); n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let apply = |x: T, y: T| match kind {
                EwiseKind::Add => x + y,
                EwiseKind::Sub => x - y,
                EwiseKind::Mul => x * y,
            };
            match bcast {
                Bcast::None => {
                    for i in 0..n {
                        out[i] = apply(av[i], bv[i]);
                    }
                }
                Bcast::ChanVec | Bcast::ChanMap => {
                    let (bn, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
                    for s in 0..bn {
                        for ch in 0..c {
                            let bvv = match bcast {
                                Bcast::ChanVec => bv[ch],
                                _ => bv[s * c + ch],
                            };
                            let base = (s * c + ch) * hw;
                            for i in 0..hw {
                                out[base + i] = apply(av[base + i], bvv);
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(dims, out, tracked, Op::Ewise { kind, a, b, bcast }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise(EwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise(EwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ewise(EwiseKind::Mul, a, b)
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        let out: Vec<T> = self.value(x).iter().map(|&v| mul * v + add).collect();
        let tracked = self.tracked(x);
        Ok(self.push(dims, out, tracked, Op::Affine { x, mul }))
    }

    // -- activations ---------------------------------------------------------

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { slope * v })
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(dims, out, tracked, Op::LeakyRelu { x, slope }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        let out: Vec<T> = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let tracked = self.tracked(x);
        Ok(self.push(dims, out, tracked, Op::Sigmoid { x }))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        let out: Vec<T> = self.value(x).iter().map(|&v| v.tanh()).collect();
        let tracked = self.tracked(x);
        Ok(self.push(dims, out, tracked, Op::Tanh { x }))
    }

    /// Gated linear unit over the channel axis of a 4-D tensor:
    /// `out = x[:, :C/2] * sigmoid(x[:, C/2:])`.
    pub fn glu(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("glu requires a 4-D input"));
        }
        let c = dims[1];
        if c % 2 != 0 {
            return Err(Error::shape(format!("glu requires even channels, got {c}")));
        }
        let half = c / 2;
        let (n, hw) = (dims[0], dims[2] * dims[3]);
        let mut out = vec![T::zero(); n * half * hw];
        {
            let xv = self.value(x);
            for s in 0..n {
                for ch in 0..half {
                    let a = (s * c + ch) * hw;
                    let b = (s * c + half + ch) * hw;
                    let o = (s * half + ch) * hw;
                    for i in 0..hw {
                        out[o + i] = xv[a + i] * sigmoid_scalar(xv[b + i]);
                    }
                }
            }
        }
        let out_dims = vec![n, half, dims[2], dims[3]];
        let tracked = self.tracked(x);
        Ok(self.push(out_dims, out, tracked, Op::Glu { x }))
    }

    // -- reductions ----------------------------------------------------------

    fn check_axes(&self, x: NodeId, axes: &[usize]) -> Result<Vec<usize>> {
        let nd = self.dims(x).len();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(Error::shape("duplicate reduction axes"));
        }
        if let Some(&bad) = sorted.iter().find(|&&a| a >= nd) {
            return Err(Error::shape(format!(
                "axis {bad} out of range for {nd}-D tensor"
            )));
        }
        Ok(sorted)
    }

    fn reduce(&mut self, x: NodeId, axes: &[usize], mean: bool) -> Result<NodeId> {
        let axes = self.check_axes(x, axes)?;
        let in_dims = self.dims(x).to_vec();
        let all = axes.is_empty() || axes.len() == in_dims.len();
        let (out_dims, reduced): (Vec<usize>, usize) = if all {
            (vec![1], numel(&in_dims))
        } else {
            let kept: Vec<usize> = (0..in_dims.len())
                .filter(|d| !axes.contains(d))
                .map(|d| in_dims[d])
                .collect();
            let reduced = axes.iter().map(|&a| in_dims[a]).product();
            (kept, reduced)
        };
        let mut out = vec![T::zero(); numel(&out_dims)];
        {
            let xv = self.value(x);
            if all {
                let mut s = T::zero();
                for &v in xv {
                    s = s + v;
                }
                out[0] = s;
            } else {
                for (i, &v) in xv.iter().enumerate() {
                    let oi = reduce_out_index(i, &in_dims, &axes, &out_dims);
                    out[oi] = out[oi] + v;
                }
            }
            if mean {
                let inv = T::one() / T::from_f64(reduced as f64);
                for v in &mut out {
                    *v = *v * inv;
                }
            }
        }
        let tracked = self.tracked(x);
        let axes_store = if all { Vec::new() } else { axes };
        let op = if mean {
            Op::Mean { x, axes: axes_store }
        } else {
            Op::Sum { x, axes: axes_store }
        };
        Ok(self.push(out_dims, out, tracked, op))
    }

    /// Sum reduction; empty `axes` reduces everything to a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(x, axes, false)
    }

    /// Mean reduction; empty `axes` reduces everything to a `[1]` scalar.
    pub fn mean(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.reduce(x, axes, true)
    }

    /// Mean over H and W of a 4-D tensor, keeping dims: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("global_avg_pool requires a 4-D input"));
        }
        let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let mut out = vec![T::zero(); n * c];
        {
            let xv = self.value(x);
            let inv = T::one() / T::from_f64(hw as f64);
            for p in 0..n * c {
                let mut s = T::zero();
                for &v in &xv[p * hw..(p + 1) * hw] {
                    s = s + v;
                }
                out[p] = s * inv;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![n, c, 1, 1], out, tracked, Op::GlobalAvgPool { x }))
    }

    /// Non-overlapping block average pool; H and W must be divisible by `block`.
    pub fn avg_pool(&mut self, x: NodeId, block: usize) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("avg_pool requires a 4-D input"));
        }
        if block == 0 || dims[2] % block != 0 || dims[3] % block != 0 {
            return Err(Error::shape(format!(
                "avg_pool block {block} does not divide {}x{}",
                dims[2], dims[3]
            )));
        }
        if block == 1 {
            return self.reshape(x, &dims);
        }
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let (ho, wo) = (h / block, w / block);
        let mut out = vec![T::zero(); n * c * ho * wo];
        {
            let xv = self.value(x);
            let inv = T::one() / T::from_f64((block * block) as f64);
            for p in 0..n * c {
                let plane = &xv[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = T::zero();
                        for dy in 0..block {
                            for dx in 0..block {
                                s = s + plane[(oy * block + dy) * w + ox * block + dx];
                            }
                        }
                        out[(p * ho + oy) * wo + ox] = s * inv;
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![n, c, ho, wo], out, tracked, Op::AvgPool { x, block }))
    }

    // -- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, new_dims: &[usize]) -> Result<NodeId> {
        check_dims(new_dims)?;
        if numel(new_dims) != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.dims(x),
                new_dims
            )));
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(new_dims.to_vec(), value, tracked, Op::Reshape { x }))
    }

    /// Nearest-neighbor upsampling by an integer factor >= 2.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 2 {
            return Err(Error::contract("upsample factor must be >= 2"));
        }
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("upsample requires a 4-D input"));
        }
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); n * c * ho * wo];
        {
            let xv = self.value(x);
            for p in 0..n * c {
                let plane = &xv[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for oy in 0..ho {
                    let src_row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        *d = src_row[ox / factor];
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![n, c, ho, wo], out, tracked, Op::Upsample { x, factor }))
    }

    // -- convolutions ----------------------------------------------------------

    fn conv_common(
        &mut self,
        kind: ConvKindOp,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let x_dims = self.dims(x).to_vec();
        let w_dims = self.dims(w).to_vec();
        if w_dims.len() != 4 {
            return Err(Error::shape(format!(
                "conv weight must be 4-D, got {w_dims:?}"
            )));
        }
        let (c_out, k) = (w_dims[0], w_dims[2]);
        if w_dims[2] != w_dims[3] {
            return Err(Error::shape("only square kernels are supported"));
        }
        match kind {
            ConvKindOp::Standard => {
                if x_dims.len() != 4 || w_dims[1] != x_dims[1] {
                    return Err(Error::shape(format!(
                        "conv weight {w_dims:?} does not match input {x_dims:?}"
                    )));
                }
            }
            ConvKindOp::Depthwise => {
                if w_dims[1] != 1 {
                    return Err(Error::shape("depthwise weight must be [C,1,K,K]"));
                }
                if x_dims.len() != 4 || c_out != x_dims[1] {
                    return Err(Error::shape(format!(
                        "depthwise weight {w_dims:?} does not match input {x_dims:?}"
                    )));
                }
            }
            ConvKindOp::Pointwise => {
                if k != 1 {
                    return Err(Error::contract("pointwise convolution requires K == 1"));
                }
                if x_dims.len() != 4 || w_dims[1] != x_dims[1] {
                    return Err(Error::shape(format!(
                        "pointwise weight {w_dims:?} does not match input {x_dims:?}"
                    )));
                }
            }
        }
        if let Some(b) = bias {
            let b_dims = self.dims(b);
            if b_dims != [c_out] {
                return Err(Error::shape(format!(
                    "bias dims {b_dims:?} do not match C_out {c_out}"
                )));
            }
        }
        let geom = ConvGeom::new(&x_dims, c_out, k, stride, pad)?;
        let bias_val = bias.map(|b| self.value(b).to_vec());
        let y = {
            let xv = self.value(x);
            let wv = self.value(w);
            match kind {
                ConvKindOp::Standard => conv::conv2d_fwd(xv, &geom, wv, bias_val.as_deref()),
                ConvKindOp::Depthwise => conv::depthwise_fwd(xv, &geom, wv, bias_val.as_deref()),
                ConvKindOp::Pointwise => conv::pointwise_fwd(xv, &geom, wv, bias_val.as_deref()),
            }
        };
        let tracked = self.tracked(x)
            || self.tracked(w)
            || bias.map(|b| self.tracked(b)).unwrap_or(false);
        Ok(self.push(
            geom.out_dims(),
            y,
            tracked,
            Op::Conv {
                kind,
                x,
                w,
                bias,
                geom,
            },
        ))
    }

    /// Standard cross-correlation with weight `[C_out, C_in, K, K]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.conv_common(ConvKindOp::Standard, x, w, bias, stride, pad)
    }

    /// Per-channel convolution with weight `[C, 1, K, K]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.conv_common(ConvKindOp::Depthwise, x, w, bias, stride, pad)
    }

    /// 1x1 channel-mixing convolution with weight `[C_out, C_in, 1, 1]`.
    pub fn pointwise_conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        self.conv_common(ConvKindOp::Pointwise, x, w, bias, 1, 0)
    }

    // -- batch norm --------------------------------------------------------

    /// Training-mode batch norm: normalizes by batch statistics and returns
    /// them so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("batch_norm requires a 4-D input"));
        }
        let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let m = n * hw;
        if m < 2 {
            return Err(Error::contract(
                "training-mode batch_norm requires at least 2 elements per channel",
            ));
        }
        self.check_bn_affine(c, gamma, beta)?;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        {
            let xv = self.value(x);
            let inv_m = T::one() / T::from_f64(m as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for s_idx in 0..n {
                    let base = (s_idx * c + ch) * hw;
                    for i in 0..hw {
                        s = s + xv[base + i];
                    }
                }
                mean[ch] = s * inv_m;
                let mut v = T::zero();
                for s_idx in 0..n {
                    let base = (s_idx * c + ch) * hw;
                    for i in 0..hw {
                        let d = xv[base + i] - mean[ch];
                        v = v + d * d;
                    }
                }
                var[ch] = v * inv_m;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let id = self.bn_apply(x, gamma, beta, &mean, &inv_std, true);
        Ok((
            id,
            BatchStats {
                mean,
                var,
            },
        ))
    }

    /// Inference-mode batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 4 {
            return Err(Error::shape("batch_norm requires a 4-D input"));
        }
        let c = dims[1];
        self.check_bn_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("running stats length mismatch"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn check_bn_affine(&self, c: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm affine params must have dims [{c}]"
            )));
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: &[T],
        training: bool,
    ) -> NodeId {
        let dims = self.dims(x).to_vec();
        let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let mut out = vec![T::zero(); numel(&dims)];
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let (mu, istd, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                    for i in 0..hw {
                        out[base + i] = (xv[base + i] - mu) * istd * g + b;
                    }
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            dims,
            out,
            tracked,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std: inv_std.to_vec(),
                training,
            },
        )
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate gradients are scratch local to this call.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got dims {:?}",
                self.nodes[loss.0].dims
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let grad = match scratch[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                let acc = node
                    .grad
                    .get_or_insert_with(|| vec![T::zero(); node.value.len()]);
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a = *a + *g;
                }
            } else {
                let op = op_shallow_clone(&self.nodes[i].op);
                self.backprop_op(i, op, &grad, &mut scratch);
            }
        }
        Ok(())
    }

    fn reduce_backward(
        &self,
        node_idx: usize,
        x: NodeId,
        axes: &[usize],
        grad: &[T],
        is_mean: bool,
    ) -> Vec<T> {
        let in_dims = self.dims(x).to_vec();
        let out_dims = self.nodes[node_idx].dims.clone();
        let count: usize = if axes.is_empty() {
            numel(&in_dims)
        } else {
            axes.iter().map(|&a| in_dims[a]).product()
        };
        let scale = if is_mean {
            T::one() / T::from_f64(count as f64)
        } else {
            T::one()
        };
        let mut dx = vec![T::zero(); numel(&in_dims)];
        if axes.is_empty() {
            dx.fill(grad[0] * scale);
        } else {
            for (i, d) in dx.iter_mut().enumerate() {
                let oi = reduce_out_index(i, &in_dims, axes, &out_dims);
                *d = grad[oi] * scale;
            }
        }
        dx
    }

    fn add_scratch(&self, scratch: &mut [Option<Vec<T>>], id: NodeId, delta: &[T]) {
        if !self.tracked(id) {
            return;
        }
        let buf = scratch[id.0].get_or_insert_with(|| vec![T::zero(); self.value(id).len()]);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b = *b + *d;
        }
    }

    fn backprop_op(
        &self,
        node_idx: usize,
        op: OpRef<T>,
        grad: &[T],
        scratch: &mut [Option<Vec<T>>],
    ) {
        match op {
            OpRef::Ewise { kind, a, b, bcast } => {
                let out_dims = self.nodes[node_idx].dims.clone();
                // da is always the unreduced gradient (possibly negated for sub's b).
                match kind {
                    EwiseKind::Add | EwiseKind::Sub => {
                        self.add_scratch(scratch, a, grad);
                        if self.tracked(b) {
                            let sign = if kind == EwiseKind::Sub {
                                -T::one()
                            } else {
                                T::one()
                            };
                            let db_full: Vec<T> = grad.iter().map(|&g| g * sign).collect();
                            let db = reduce_bcast(&db_full, &out_dims, bcast);
                            self.add_scratch(scratch, b, &db);
                        }
                    }
                    EwiseKind::Mul => {
                        if self.tracked(a) {
                            let bv = self.value(b);
                            let da = expand_mul(grad, bv, &out_dims, bcast);
                            self.add_scratch(scratch, a, &da);
                        }
                        if self.tracked(b) {
                            let av = self.value(a);
                            let prod: Vec<T> =
                                grad.iter().zip(av).map(|(&g, &x)| g * x).collect();
                            let db = reduce_bcast(&prod, &out_dims, bcast);
                            self.add_scratch(scratch, b, &db);
                        }
                    }
                }
            }
            OpRef::Affine { x, mul, .. } => {
                let dx: Vec<T> = grad.iter().map(|&g| g * mul).collect();
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let dx: Vec<T> = grad
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
                    .collect();
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::Sigmoid { x } => {
                let yv = &self.nodes[node_idx].value;
                let dx: Vec<T> = grad
                    .iter()
                    .zip(yv)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::Tanh { x } => {
                let yv = &self.nodes[node_idx].value;
                let dx: Vec<T> = grad
                    .iter()
                    .zip(yv)
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::Glu { x } => {
                let in_dims = self.dims(x).to_vec();
                let (n, c, hw) = (in_dims[0], in_dims[1], in_dims[2] * in_dims[3]);
                let half = c / 2;
                let xv = self.value(x);
                let mut dx = vec![T::zero(); xv.len()];
                for s in 0..n {
                    for ch in 0..half {
                        let ai = (s * c + ch) * hw;
                        let bi = (s * c + half + ch) * hw;
                        let oi = (s * half + ch) * hw;
                        for k in 0..hw {
                            let sig = sigmoid_scalar(xv[bi + k]);
                            let g = grad[oi + k];
                            dx[ai + k] = g * sig;
                            dx[bi + k] = g * xv[ai + k] * sig * (T::one() - sig);
                        }
                    }
                }
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::Sum { x, axes } => {
                let dx = self.reduce_backward(node_idx, x, &axes, grad, false);
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::Mean { x, axes } => {
                let dx = self.reduce_backward(node_idx, x, &axes, grad, true);
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::GlobalAvgPool { x } => {
                let in_dims = self.dims(x).to_vec();
                let (n, c, hw) = (in_dims[0], in_dims[1], in_dims[2] * in_dims[3]);
                let inv = T::one() / T::from_f64(hw as f64);
                let mut dx = vec![T::zero(); numel(&in_dims)];
                for p in 0..n * c {
                    let g = grad[p] * inv;
                    dx[p * hw..(p + 1) * hw].fill(g);
                }
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::AvgPool { x, block } => {
                let in_dims = self.dims(x).to_vec();
                let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
                let (ho, wo) = (h / block, w / block);
                let inv = T::one() / T::from_f64((block * block) as f64);
                let mut dx = vec![T::zero(); numel(&in_dims)];
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = grad[(p * ho + oy) * wo + ox] * inv;
                            for dy in 0..block {
                                for dxx in 0..block {
                                    dx[p * h * w + (oy * block + dy) * w + ox * block + dxx] = g;
                                }
                            }
                        }
                    }
                }
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::Reshape { x } => {
                self.add_scratch(scratch, x, grad);
            }
            OpRef::Upsample { x, factor } => {
                let in_dims = self.dims(x).to_vec();
                let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
                let wo = w * factor;
                let mut dx = vec![T::zero(); numel(&in_dims)];
                for p in 0..n * c {
                    let gplane = &grad[p * h * factor * wo..(p + 1) * h * factor * wo];
                    let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..h * factor {
                        let drow = &mut dplane[(oy / factor) * w..(oy / factor + 1) * w];
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        for (ox, &g) in grow.iter().enumerate() {
                            drow[ox / factor] = drow[ox / factor] + g;
                        }
                    }
                }
                self.add_scratch(scratch, x, &dx);
            }
            OpRef::Conv {
                kind,
                x,
                w,
                bias,
                geom,
            } => {
                let need_dx = self.tracked(x);
                let need_dw = self.tracked(w);
                let need_db = bias.map(|b| self.tracked(b)).unwrap_or(false);
                if !(need_dx || need_dw || need_db) {
                    return;
                }
                let grads = {
                    let xv = self.value(x);
                    let wv = self.value(w);
                    match kind {
                        ConvKindOp::Standard => {
                            conv::conv2d_bwd(xv, &geom, wv, grad, need_dx, need_dw, need_db)
                        }
                        ConvKindOp::Depthwise => {
                            conv::depthwise_bwd(xv, &geom, wv, grad, need_dx, need_dw, need_db)
                        }
                        ConvKindOp::Pointwise => {
                            conv::pointwise_bwd(xv, &geom, wv, grad, need_dx, need_dw, need_db)
                        }
                    }
                };
                if let Some(dx) = grads.dx {
                    self.add_scratch(scratch, x, &dx);
                }
                if let Some(dw) = grads.dw {
                    self.add_scratch(scratch, w, &dw);
                }
                if let (Some(db), Some(b)) = (grads.db, bias) {
                    self.add_scratch(scratch, b, &db);
                }
            }
            OpRef::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let in_dims = self.dims(x).to_vec();
                let (n, c, hw) = (in_dims[0], in_dims[1], in_dims[2] * in_dims[3]);
                let m = T::from_f64((n * hw) as f64);
                let xv = self.value(x).to_vec();
                let gv = self.value(gamma).to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = self.tracked(x).then(|| vec![T::zero(); xv.len()]);
                for ch in 0..c {
                    let (mu, istd, gam) = (mean[ch], inv_std[ch], gv[ch]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            let g = grad[base + i];
                            let xhat = (xv[base + i] - mu) * istd;
                            dgamma[ch] = dgamma[ch] + g * xhat;
                            dbeta[ch] = dbeta[ch] + g;
                            sum_dxhat = sum_dxhat + g * gam;
                            sum_dxhat_xhat = sum_dxhat_xhat + g * gam * xhat;
                        }
                    }
                    if let Some(dx_buf) = dx.as_mut() {
                        for s in 0..n {
                            let base = (s * c + ch) * hw;
                            for i in 0..hw {
                                let g = grad[base + i];
                                let dxhat = g * gam;
                                let v = if training {
                                    let xhat = (xv[base + i] - mu) * istd;
                                    (istd / m)
                                        * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
                                } else {
                                    dxhat * istd
                                };
                                dx_buf[base + i] = v;
                            }
                        }
                    }
                }
                if let Some(dx_buf) = dx {
                    self.add_scratch(scratch, x, &dx_buf);
                }
                self.add_scratch(scratch, gamma, &dgamma);
                self.add_scratch(scratch, beta, &dbeta);
            }
        }
    }
}

fn sigmoid_scalar<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Maps a flat input index to the flat output index of a reduction that
/// removes `axes` (sorted ascending) from `in_dims`.
fn reduce_out_index(flat: usize, in_dims: &[usize], axes: &[usize], out_dims: &[usize]) -> usize {
    let nd = in_dims.len();
    let mut coords = vec![0usize; nd];
    let mut rem = flat;
    for d in (0..nd).rev() {
        coords[d] = rem % in_dims[d];
        rem /= in_dims[d];
    }
    let mut oi = 0;
    let mut stride = 1;
    let mut out_axis = out_dims.len();
    for d in (0..nd).rev() {
        if axes.contains(&d) {
            continue;
        }
        out_axis -= 1;
        oi += coords[d] * stride;
        stride *= out_dims[out_axis];
    }
    oi
}

/// Sums a full-shaped gradient down to the broadcast operand's shape.
fn reduce_bcast<T: Element>(full: &[T], out_dims: &[usize], bcast: Bcast) -> Vec<T> {
    match bcast {
        Bcast::None => full.to_vec(),
        Bcast::ChanVec => {
            let (n, c, hw) = (out_dims[0], out_dims[1], out_dims[2] * out_dims[3]);
            let mut out = vec![T::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for i in 0..hw {
                        out[ch] = out[ch] + full[base + i];
                    }
                }
            }
            out
        }
        Bcast::ChanMap => {
            let (n, c, hw) = (out_dims[0], out_dims[1], out_dims[2] * out_dims[3]);
            let mut out = vec![T::zero(); n * c];
            for p in 0..n * c {
                for i in 0..hw {
                    out[p] = out[p] + full[p * hw + i];
                }
            }
            out
        }
    }
}

/// Elementwise product of the gradient with the (broadcast-expanded) operand.
fn expand_mul<T: Element>(grad: &[T], b: &[T], out_dims: &[usize], bcast: Bcast) -> Vec<T> {
    match bcast {
        Bcast::None => grad.iter().zip(b).map(|(&g, &v)| g * v).collect(),
        Bcast::ChanVec | Bcast::ChanMap => {
            let (n, c, hw) = (out_dims[0], out_dims[1], out_dims[2] * out_dims[3]);
            let mut out = vec![T::zero(); grad.len()];
            for s in 0..n {
                for ch in 0..c {
                    let bv = match bcast {
                        Bcast::ChanVec => b[ch],
                        _ => b[s * c + ch],
                    };
                    let base = (s * c + ch) * hw;
                    for i in 0..hw {
                        out[base + i] = grad[base + i] * bv;
                    }
                }
            }
            out
        }
    }
}

/// Cheap by-value view of an op for the backward dispatch (indices and small
/// saved vectors only; conv geometry is Copy).
enum OpRef<T> {
    Ewise {
        kind: EwiseKind,
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    },
    Affine {
        x: NodeId,
        mul: T,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Glu {
        x: NodeId,
    },
    Sum {
        x: NodeId,
        axes: Vec<usize>,
    },
    Mean {
        x: NodeId,
        axes: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    AvgPool {
        x: NodeId,
        block: usize,
    },
    Reshape {
        x: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Conv {
        kind: ConvKindOp,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
}

fn op_shallow_clone<T: Element>(op: &Op<T>) -> OpRef<T> {
    match op {
        Op::Leaf => unreachable!("leaves are handled before dispatch"),
        Op::Ewise { kind, a, b, bcast } => OpRef::Ewise {
            kind: *kind,
            a: *a,
            b: *b,
            bcast: *bcast,
        },
        Op::Affine { x, mul } => OpRef::Affine { x: *x, mul: *mul },
        Op::LeakyRelu { x, slope } => OpRef::LeakyRelu {
            x: *x,
            slope: *slope,
        },
        Op::Sigmoid { x } => OpRef::Sigmoid { x: *x },
        Op::Tanh { x } => OpRef::Tanh { x: *x },
        Op::Glu { x } => OpRef::Glu { x: *x },
        Op::Sum { x, axes } => OpRef::Sum {
            x: *x,
            axes: axes.clone(),
        },
        Op::Mean { x, axes } => OpRef::Mean {
            x: *x,
            axes: axes.clone(),
        },
        Op::GlobalAvgPool { x } => OpRef::GlobalAvgPool { x: *x },
        Op::AvgPool { x, block } => OpRef::AvgPool {
            x: *x,
            block: *block,
        },
        Op::Reshape { x } => OpRef::Reshape { x: *x },
        Op::Upsample { x, factor } => OpRef::Upsample {
            x: *x,
            factor: *factor,
        },
        Op::Conv {
            kind,
            x,
            w,
            bias,
            geom,
        } => OpRef::Conv {
            kind: *kind,
            x: *x,
            w: *w,
            bias: *bias,
            geom: *geom,
        },
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            training,
        } => OpRef::BatchNorm {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            mean: mean.clone(),
            inv_std: inv_std.clone(),
            training: *training,
        },
    }
}
