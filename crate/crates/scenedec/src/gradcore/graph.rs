//! Recorded-tape reverse-mode autodiff over [`Tensor`] values.
//!
//! Forward values are computed eagerly as operations are applied; `backward`
//! replays the tape in reverse. The operation set is exactly what the noise
//! predictor and its losses need.

use std::collections::{BTreeMap, BTreeSet};

use super::kernels;
use super::tensor::Tensor;
use super::GradError;

pub type NodeId = usize;

/// Epsilon inside the group-norm denominator.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// One recorded operation. Inputs refer to earlier nodes, so the graph is
/// acyclic by construction.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId, transpose_a: bool, transpose_b: bool },
    /// 3x3 kernel, stride 1, same padding. Input [C,H,W], kernel [O,C,3,3].
    Conv2d { input: NodeId, kernel: NodeId },
    Softmax { input: NodeId, axis: usize },
    Silu { input: NodeId },
    GroupNorm { input: NodeId, groups: usize },
    Reshape { input: NodeId, shape: Vec<usize> },
    /// Mean over all entries, scalar output.
    Mean { input: NodeId },
    /// Sum over all entries, scalar output.
    Sum { input: NodeId },
    /// `b` broadcast against the trailing axes of `a` (missing or size-1
    /// axes of `b` repeat).
    BroadcastAdd { a: NodeId, b: NodeId },
    Square { input: NodeId },
    Scale { input: NodeId, factor: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::Silu { .. } => "silu",
            Op::GroupNorm { .. } => "group-norm",
            Op::Reshape { .. } => "reshape",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::BroadcastAdd { .. } => "broadcast-add",
            Op::Square { .. } => "elementwise-square",
            Op::Scale { .. } => "scale",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Mul { a, b } | Op::BroadcastAdd { a, b } => vec![a, b],
            Op::Matmul { a, b, .. } => vec![a, b],
            Op::Conv2d { input, kernel } => vec![input, kernel],
            Op::Softmax { input, .. }
            | Op::Silu { input }
            | Op::GroupNorm { input, .. }
            | Op::Reshape { input, .. }
            | Op::Mean { input }
            | Op::Sum { input }
            | Op::Square { input }
            | Op::Scale { input, .. } => vec![input],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation tape. Single-owner mutable state; distinct graphs
/// may be evaluated in parallel, and tensors read from the graph are
/// immutable.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeSet<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Record a trainable parameter; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.insert(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &BTreeSet<NodeId> {
        &self.params
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.params.contains(&id)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Validate and record an operation; the forward value is computed
    /// eagerly and the new node id returned.
    pub fn apply(&mut self, op: Op) -> Result<NodeId, GradError> {
        for id in op.inputs() {
            if id >= self.nodes.len() {
                return Err(GradError::UnknownNode(id));
            }
        }
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    // -- convenience wrappers --------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Mul { a, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Matmul { a, b, transpose_a: false, transpose_b: false })
    }

    pub fn matmul_ex(
        &mut self,
        a: NodeId,
        b: NodeId,
        transpose_a: bool,
        transpose_b: bool,
    ) -> Result<NodeId, GradError> {
        self.apply(Op::Matmul { a, b, transpose_a, transpose_b })
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Conv2d { input, kernel })
    }

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId, GradError> {
        self.apply(Op::Softmax { input, axis })
    }

    pub fn silu(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Silu { input })
    }

    pub fn group_norm(&mut self, input: NodeId, groups: usize) -> Result<NodeId, GradError> {
        self.apply(Op::GroupNorm { input, groups })
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, GradError> {
        self.apply(Op::Reshape { input, shape })
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Mean { input })
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Sum { input })
    }

    pub fn broadcast_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::BroadcastAdd { a, b })
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        self.apply(Op::Square { input })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, GradError> {
        self.apply(Op::Scale { input, factor })
    }

    /// a - b, composed from scale and add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    // -- forward -----------------------------------------------------------

    fn shape_err(&self, op: &Op, lhs: &[usize], rhs: &[usize]) -> GradError {
        GradError::ShapeMismatch {
            op: op.name().to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    fn eval(&self, op: &Op) -> Result<Tensor, GradError> {
        match *op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::Add { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                if ta.shape() != tb.shape() {
                    return Err(self.shape_err(op, ta.shape(), tb.shape()));
                }
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
                Ok(Tensor::from_parts(ta.shape().to_vec(), data))
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                if ta.shape() != tb.shape() {
                    return Err(self.shape_err(op, ta.shape(), tb.shape()));
                }
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                Ok(Tensor::from_parts(ta.shape().to_vec(), data))
            }
            Op::Matmul { a, b, transpose_a, transpose_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                if ta.shape().len() != 2 || tb.shape().len() != 2 {
                    return Err(self.shape_err(op, ta.shape(), tb.shape()));
                }
                let (m, ka) = if transpose_a {
                    (ta.shape()[1], ta.shape()[0])
                } else {
                    (ta.shape()[0], ta.shape()[1])
                };
                let (kb, n) = if transpose_b {
                    (tb.shape()[1], tb.shape()[0])
                } else {
                    (tb.shape()[0], tb.shape()[1])
                };
                if ka != kb {
                    return Err(self.shape_err(op, ta.shape(), tb.shape()));
                }
                let mut out = vec![0.0; m * n];
                match (transpose_a, transpose_b) {
                    (false, false) => kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, ka, n),
                    (true, false) => kernels::matmul_ta_acc(ta.data(), tb.data(), &mut out, m, ka, n),
                    (false, true) => kernels::matmul_tb_acc(ta.data(), tb.data(), &mut out, m, ka, n),
                    (true, true) => {
                        let at = kernels::transpose(ta.data(), ka, m);
                        kernels::matmul_tb_acc(&at, tb.data(), &mut out, m, ka, n);
                    }
                }
                Ok(Tensor::from_parts(vec![m, n], out))
            }
            Op::Conv2d { input, kernel } => {
                let (ti, tk) = (self.value(input), self.value(kernel));
                let ishape = ti.shape();
                let kshape = tk.shape();
                let valid = ishape.len() == 3
                    && kshape.len() == 4
                    && kshape[1] == ishape[0]
                    && kshape[2] == 3
                    && kshape[3] == 3;
                if !valid {
                    return Err(self.shape_err(op, ishape, kshape));
                }
                let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                let o = kshape[0];
                let mut out = vec![0.0; o * h * w];
                kernels::conv2d_forward(ti.data(), tk.data(), c, o, h, w, &mut out);
                Ok(Tensor::from_parts(vec![o, h, w], out))
            }
            Op::Softmax { input, axis } => {
                let t = self.value(input);
                if axis >= t.shape().len() {
                    return Err(GradError::InvalidAxis { axis, shape: t.shape().to_vec() });
                }
                let (outer, len, inner) = axis_split(t.shape(), axis);
                let mut out = t.data().to_vec();
                for oi in 0..outer {
                    for ii in 0..inner {
                        let base = oi * len * inner + ii;
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..len {
                            max = max.max(out[base + j * inner]);
                        }
                        let mut sum = 0.0;
                        for j in 0..len {
                            let e = (out[base + j * inner] - max).exp();
                            out[base + j * inner] = e;
                            sum += e;
                        }
                        for j in 0..len {
                            out[base + j * inner] /= sum;
                        }
                    }
                }
                Ok(Tensor::from_parts(t.shape().to_vec(), out))
            }
            Op::Silu { input } => {
                let t = self.value(input);
                let data = t.data().iter().map(|&x| x * sigmoid(x)).collect();
                Ok(Tensor::from_parts(t.shape().to_vec(), data))
            }
            Op::GroupNorm { input, groups } => {
                let t = self.value(input);
                let shape = t.shape();
                if shape.len() != 3 || groups == 0 || shape[0] % groups != 0 {
                    return Err(GradError::InvalidGroups { groups, shape: shape.to_vec() });
                }
                let gs = t.numel() / groups;
                let mut out = vec![0.0; t.numel()];
                for g in 0..groups {
                    let x = &t.data()[g * gs..(g + 1) * gs];
                    let mean = x.iter().sum::<f64>() / gs as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
                    let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                    for (o, v) in out[g * gs..(g + 1) * gs].iter_mut().zip(x) {
                        *o = (v - mean) * inv;
                    }
                }
                Ok(Tensor::from_parts(shape.to_vec(), out))
            }
            Op::Reshape { input, ref shape } => {
                let t = self.value(input);
                let numel: usize = shape.iter().product();
                if numel != t.numel() {
                    return Err(self.shape_err(op, t.shape(), shape));
                }
                Ok(Tensor::from_parts(shape.clone(), t.data().to_vec()))
            }
            Op::Mean { input } => {
                let t = self.value(input);
                Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64))
            }
            Op::Sum { input } => {
                let t = self.value(input);
                Ok(Tensor::scalar(t.data().iter().sum::<f64>()))
            }
            Op::BroadcastAdd { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let Some(bstrides) = broadcast_strides(ta.shape(), tb.shape()) else {
                    return Err(self.shape_err(op, ta.shape(), tb.shape()));
                };
                let mut out = ta.data().to_vec();
                for_each_broadcast(ta.shape(), &bstrides, |ai, bi| {
                    out[ai] += tb.data()[bi];
                });
                Ok(Tensor::from_parts(ta.shape().to_vec(), out))
            }
            Op::Square { input } => {
                let t = self.value(input);
                let data = t.data().iter().map(|&x| x * x).collect();
                Ok(Tensor::from_parts(t.shape().to_vec(), data))
            }
            Op::Scale { input, factor } => {
                let t = self.value(input);
                let data = t.data().iter().map(|&x| x * factor).collect();
                Ok(Tensor::from_parts(t.shape().to_vec(), data))
            }
        }
    }

    /// Recompute every non-leaf value in tape order. Used after a leaf or
    /// parameter value is edited in place (finite differencing).
    pub(crate) fn recompute_forward(&mut self) -> Result<(), GradError> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.nodes[id].value = self.eval(&op)?;
        }
        Ok(())
    }

    pub(crate) fn set_leaf_entry(&mut self, id: NodeId, idx: usize, v: f64) {
        debug_assert!(matches!(self.nodes[id].op, Op::Leaf));
        self.nodes[id].value.data_mut()[idx] = v;
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns one gradient per parameter
    /// node; parameters the loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<NodeId, Tensor>, GradError> {
        let wanted = self.params.clone();
        self.backward_filtered(loss, &wanted)
    }

    /// As `backward`, but only the gradients of `wanted` parameters are
    /// computed; subtrees no wanted parameter feeds are skipped entirely.
    pub fn backward_filtered(
        &mut self,
        loss: NodeId,
        wanted: &BTreeSet<NodeId>,
    ) -> Result<BTreeMap<NodeId, Tensor>, GradError> {
        if loss >= self.nodes.len() {
            return Err(GradError::UnknownNode(loss));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(GradError::NonScalarLoss {
                shape: self.nodes[loss].value.shape().to_vec(),
            });
        }

        // A node needs a gradient iff some wanted parameter feeds it.
        let mut needed = vec![false; self.nodes.len()];
        for &p in wanted {
            if p < needed.len() {
                needed[p] = true;
            }
        }
        for id in 0..self.nodes.len() {
            if !needed[id] {
                needed[id] = self.nodes[id].op.inputs().iter().any(|&i| needed[i]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if needed[loss] {
            grads[loss] = Some(Tensor::scalar(1.0));
        }

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            self.vjp(&op, id, &g, &needed, &mut grads);
            if self.params.contains(&id) {
                grads[id] = Some(g); // keep parameter gradients for collection
            }
        }

        let mut out = BTreeMap::new();
        for &p in wanted {
            let g = grads[p]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[p].value.shape().to_vec()));
            out.insert(p, g);
        }
        Ok(out)
    }

    fn accum(
        grads: &mut [Option<Tensor>],
        needed: &[bool],
        id: NodeId,
        shape: &[usize],
        f: impl FnOnce(&mut [f64]),
    ) {
        if !needed[id] {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
        f(slot.data_mut());
    }

    fn vjp(
        &self,
        op: &Op,
        out_id: NodeId,
        g: &Tensor,
        needed: &[bool],
        grads: &mut Vec<Option<Tensor>>,
    ) {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for id in [a, b] {
                    Self::accum(grads, needed, id, self.value(id).shape(), |d| {
                        for (x, y) in d.iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                Self::accum(grads, needed, a, va.shape(), |d| {
                    for ((x, y), z) in d.iter_mut().zip(g.data()).zip(vb.data()) {
                        *x += y * z;
                    }
                });
                Self::accum(grads, needed, b, vb.shape(), |d| {
                    for ((x, y), z) in d.iter_mut().zip(g.data()).zip(va.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::Matmul { a, b, transpose_a, transpose_b } => {
                self.vjp_matmul(a, b, transpose_a, transpose_b, out_id, g, needed, grads);
            }
            Op::Conv2d { input, kernel } => {
                let (vi, vk) = (self.value(input), self.value(kernel));
                let (c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                let o = vk.shape()[0];
                // Both directions share the patch matrix; compute the pieces
                // each needed side asks for.
                if needed[input] {
                    let ik = c * 9;
                    let mut dcolt = vec![0.0; ik * h * w];
                    kernels::matmul_ta_acc(vk.data(), g.data(), &mut dcolt, ik, o, h * w);
                    Self::accum(grads, needed, input, vi.shape(), |d| {
                        kernels::col2im_t(&dcolt, c, h, w, d);
                    });
                }
                if needed[kernel] {
                    let ik = c * 9;
                    let mut colt = vec![0.0; ik * h * w];
                    kernels::im2col_t(vi.data(), c, h, w, &mut colt);
                    Self::accum(grads, needed, kernel, vk.shape(), |d| {
                        kernels::matmul_tb_acc(g.data(), &colt, d, o, h * w, ik);
                    });
                }
            }
            Op::Softmax { input, axis } => {
                let s = self.value(out_id);
                let (outer, len, inner) = axis_split(s.shape(), axis);
                Self::accum(grads, needed, input, s.shape(), |d| {
                    for oi in 0..outer {
                        for ii in 0..inner {
                            let base = oi * len * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let k = base + j * inner;
                                dot += g.data()[k] * s.data()[k];
                            }
                            for j in 0..len {
                                let k = base + j * inner;
                                d[k] += s.data()[k] * (g.data()[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::Silu { input } => {
                let x = self.value(input);
                Self::accum(grads, needed, input, x.shape(), |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g.data()).zip(x.data()) {
                        let s = sigmoid(xv);
                        *dv += gv * (s + xv * s * (1.0 - s));
                    }
                });
            }
            Op::GroupNorm { input, groups } => {
                let x = self.value(input);
                let xhat = self.value(out_id);
                let gs = x.numel() / groups;
                Self::accum(grads, needed, input, x.shape(), |d| {
                    for gi in 0..groups {
                        let lo = gi * gs;
                        let hi = lo + gs;
                        let xs = &x.data()[lo..hi];
                        let hs = &xhat.data()[lo..hi];
                        let gsl = &g.data()[lo..hi];
                        let mean = xs.iter().sum::<f64>() / gs as f64;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
                        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                        let g_mean = gsl.iter().sum::<f64>() / gs as f64;
                        let gx_mean =
                            gsl.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>() / gs as f64;
                        for ((dv, &gv), &hv) in d[lo..hi].iter_mut().zip(gsl).zip(hs) {
                            *dv += inv * (gv - g_mean - hv * gx_mean);
                        }
                    }
                });
            }
            Op::Reshape { input, .. } => {
                let x = self.value(input);
                Self::accum(grads, needed, input, x.shape(), |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.data()) {
                        *dv += gv;
                    }
                });
            }
            Op::Mean { input } => {
                let x = self.value(input);
                let scale = g.item() / x.numel() as f64;
                Self::accum(grads, needed, input, x.shape(), |d| {
                    for dv in d.iter_mut() {
                        *dv += scale;
                    }
                });
            }
            Op::Sum { input } => {
                let x = self.value(input);
                let gv = g.item();
                Self::accum(grads, needed, input, x.shape(), |d| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::BroadcastAdd { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                Self::accum(grads, needed, a, va.shape(), |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.data()) {
                        *dv += gv;
                    }
                });
                if needed[b] {
                    let strides = broadcast_strides(va.shape(), vb.shape())
                        .expect("validated at apply time");
                    Self::accum(grads, needed, b, vb.shape(), |d| {
                        for_each_broadcast(va.shape(), &strides, |ai, bi| {
                            d[bi] += g.data()[ai];
                        });
                    });
                }
            }
            Op::Square { input } => {
                let x = self.value(input);
                Self::accum(grads, needed, input, x.shape(), |d| {
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g.data()).zip(x.data()) {
                        *dv += 2.0 * xv * gv;
                    }
                });
            }
            Op::Scale { input, factor } => {
                let x = self.value(input);
                Self::accum(grads, needed, input, x.shape(), |d| {
                    for (dv, &gv) in d.iter_mut().zip(g.data()) {
                        *dv += factor * gv;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn vjp_matmul(
        &self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        _out: NodeId,
        g: &Tensor,
        needed: &[bool],
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, n) = (g.shape()[0], g.shape()[1]);
        let k = if ta { va.shape()[0] } else { va.shape()[1] };

        if needed[a] {
            Self::accum(grads, needed, a, va.shape(), |d| match (ta, tb) {
                // dA = dC @ B^T
                (false, false) => kernels::matmul_tb_acc(g.data(), vb.data(), d, m, n, k),
                // B stored [n,k]: dA = dC @ B
                (false, true) => kernels::matmul_acc(g.data(), vb.data(), d, m, n, k),
                // A stored [k,m]: dA = B @ dC^T
                (true, false) => kernels::matmul_tb_acc(vb.data(), g.data(), d, k, n, m),
                // A stored [k,m], B stored [n,k]: dA = (dC @ B)^T
                (true, true) => {
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul_acc(g.data(), vb.data(), &mut tmp, m, n, k);
                    for i in 0..m {
                        for l in 0..k {
                            d[l * m + i] += tmp[i * k + l];
                        }
                    }
                }
            });
        }
        if needed[b] {
            Self::accum(grads, needed, b, vb.shape(), |d| match (ta, tb) {
                // dB = A^T @ dC
                (false, false) => kernels::matmul_ta_acc(va.data(), g.data(), d, k, m, n),
                // dB stored [n,k]: dB = dC^T @ A
                (false, true) => kernels::matmul_ta_acc(g.data(), va.data(), d, n, m, k),
                // A stored [k,m]: dB = A @ dC
                (true, false) => kernels::matmul_acc(va.data(), g.data(), d, k, m, n),
                // dB stored [n,k] with A stored [k,m]: dB = (A @ dC)^T
                (true, true) => {
                    let mut tmp = vec![0.0; k * n];
                    kernels::matmul_acc(va.data(), g.data(), &mut tmp, k, m, n);
                    for l in 0..k {
                        for j in 0..n {
                            d[j * k + l] += tmp[l * n + j];
                        }
                    }
                }
            });
        }
    }

    // -- gradient verification ----------------------------------------------

    /// Max over entries of `|analytic - central difference| / (|central| + 1e-8)`
    /// for one parameter node, probing with step `h`.
    pub fn fd_check(&mut self, loss: NodeId, param: NodeId, h: f64) -> Result<f64, GradError> {
        if h <= 0.0 {
            return Err(GradError::InvalidStep(h));
        }
        if !self.params.contains(&param) {
            return Err(GradError::NotAParameter(param));
        }
        let analytic = self
            .backward(loss)?
            .remove(&param)
            .expect("param present in backward output");

        let numel = self.nodes[param].value.numel();
        let mut worst = 0.0f64;
        for idx in 0..numel {
            let orig = self.nodes[param].value.data()[idx];
            self.set_leaf_entry(param, idx, orig + h);
            self.recompute_forward()?;
            let plus = self.nodes[loss].value.item();
            self.set_leaf_entry(param, idx, orig - h);
            self.recompute_forward()?;
            let minus = self.nodes[loss].value.item();
            self.set_leaf_entry(param, idx, orig);

            let central = (plus - minus) / (2.0 * h);
            let rel = (analytic.data()[idx] - central).abs() / (central.abs() + 1e-8);
            worst = worst.max(rel);
        }
        self.recompute_forward()?;
        Ok(worst)
    }

    /// `fd_check` over every parameter node; exactly 0 for a graph with no
    /// parameters.
    pub fn fd_check_all(&mut self, loss: NodeId, h: f64) -> Result<f64, GradError> {
        let params: Vec<NodeId> = self.params.iter().copied().collect();
        let mut worst = 0.0;
        for p in params {
            worst = f64::max(worst, self.fd_check(loss, p, h)?);
        }
        Ok(worst)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Strides of `b` aligned against the trailing axes of `a`; `None` when the
/// shapes are not broadcast-compatible. A stride of 0 marks a repeated axis.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let offset = a.len() - b.len();
    let mut strides = vec![0usize; a.len()];
    let mut acc = 1usize;
    for i in (0..b.len()).rev() {
        let (ad, bd) = (a[offset + i], b[i]);
        if bd == ad {
            strides[offset + i] = acc;
            acc *= bd;
        } else if bd == 1 {
            strides[offset + i] = 0;
            acc *= 1;
        } else {
            return None;
        }
    }
    Some(strides)
}

/// Visit every index of shape `a`, yielding the flat offsets into `a` and
/// into the broadcast tensor described by `strides`.
fn for_each_broadcast(a: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = a.iter().product();
    let mut idx = vec![0usize; a.len()];
    for ai in 0..numel {
        let bi: usize = idx.iter().zip(strides).map(|(i, s)| i * s).sum();
        f(ai, bi);
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
