//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every primitive application in topological order and
//! stores all intermediate values (no recomputation on backward). Gradients
//! accumulate by summation on fan-out. Any NaN/Inf produced in a forward or
//! backward pass aborts with an error naming the offending primitive.
//!
//! A tape is single-threaded; distinct tapes share nothing. Tensors outside a
//! tape are plain data and freely shareable.

use crate::tensor::Tensor;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Forward => write!(f, "forward"),
            Phase::Backward => write!(f, "backward"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value during {phase} pass")]
    NonFinite { op: &'static str, phase: Phase },
    #[error("gradient target must be a scalar, got shape {dims:?}")]
    NonScalarOutput { dims: Vec<usize> },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("node does not belong to this tape")]
    ForeignNode,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// One recorded primitive: which operation produced the node's value.
///
/// Saved intermediates (pool/max argmax indices) live inline so backward
/// replay never recomputes a forward quantity.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, f64),
    Matmul(NodeId, NodeId),
    Conv2d { input: NodeId, kernel: NodeId, stride: usize },
    MaxPool2d { input: NodeId, argmax: Vec<u32> },
    Relu(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Log(NodeId),
    Exp(NodeId),
    MaxOverAxis { input: NodeId, argmax: Vec<u32> },
    Norm(NodeId),
    Dot(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by the node they belong to.
///
/// A node that the output does not depend on keeps `None`; [`Gradients::get`]
/// then reports it unreached and [`Gradients::or_zeros`] substitutes an exact
/// zero tensor.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// True when gradient actually flowed into this node.
    pub fn reached(&self, id: NodeId) -> bool {
        self.get(id).is_some()
    }

    /// Gradient of `id`, or zeros in the node's shape when unreached.
    pub fn or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).dims()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves are the only nodes without parents.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "leaf holds non-finite values");
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<(), EngineError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(EngineError::ForeignNode)
        }
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId, EngineError> {
        if !value.all_finite() {
            return Err(EngineError::NonFinite { op: op_name, phase: Phase::Forward });
        }
        Ok(self.push(value, op))
    }

    // ── elementwise and broadcast arithmetic ──

    /// Elementwise sum. Also accepts a rank-0 operand (broadcast over the
    /// other) or, for a rank-3 `[F,H,W]` left side, a `[F]` right side added
    /// per channel (the convolution-bias case).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_broadcast("add", a, b, |x, y| x + y)
    }

    /// Elementwise difference, same broadcast rules as [`Tape::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_broadcast("sub", a, b, |x, y| x - y)
    }

    /// Elementwise product, same broadcast rules as [`Tape::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_broadcast("mul", a, b, |x, y| x * y)
    }

    fn binary_broadcast(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = match broadcast_kind(va, vb) {
            Some(Broadcast::Same) => {
                let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(va.dims().to_vec(), data)?
            }
            Some(Broadcast::ScalarRight) => {
                let s = vb.item();
                let data = va.data().iter().map(|&x| f(x, s)).collect();
                Tensor::new(va.dims().to_vec(), data)?
            }
            Some(Broadcast::ScalarLeft) => {
                let s = va.item();
                let data = vb.data().iter().map(|&y| f(s, y)).collect();
                Tensor::new(vb.dims().to_vec(), data)?
            }
            Some(Broadcast::ChannelRight) => {
                let (channels, plane) = (va.dims()[0], va.dims()[1] * va.dims()[2]);
                let mut data = Vec::with_capacity(va.len());
                for c in 0..channels {
                    let s = vb.data()[c];
                    data.extend(va.data()[c * plane..(c + 1) * plane].iter().map(|&x| f(x, s)));
                }
                Tensor::new(va.dims().to_vec(), data)?
            }
            None => {
                return Err(EngineError::ShapeMismatch {
                    op: op_name,
                    detail: format!("{:?} vs {:?}", va.dims(), vb.dims()),
                })
            }
        };
        let op = match op_name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.record(op_name, value, op)
    }

    /// Adds a constant to every element; the constant is not differentiated.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        let value = Tensor::new(va.dims().to_vec(), va.data().iter().map(|&x| x + c).collect())?;
        self.record("add_scalar", value, Op::AddConst(a))
    }

    /// Multiplies every element by a constant; the constant is not differentiated.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        let value = Tensor::new(va.dims().to_vec(), va.data().iter().map(|&x| x * c).collect())?;
        self.record("scale", value, Op::MulConst(a, c))
    }

    // ── linear algebra ──

    /// `[m,k] × [k,n] → [m,n]`, or `[m,k] × [k] → [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                detail: format!("left operand must be rank 2, got {:?}", va.dims()),
            });
        }
        let (m, k) = (va.dims()[0], va.dims()[1]);
        let value = match vb.dims() {
            [kb] if *kb == k => {
                let mut out = vec![0.0; m];
                for (o, row) in out.iter_mut().zip(va.data().chunks_exact(k)) {
                    *o = dot_slices(row, vb.data());
                }
                Tensor::new(vec![m], out)?
            }
            [kb, n] if *kb == k => {
                let n = *n;
                let mut out = vec![0.0; m * n];
                for (out_row, a_row) in out.chunks_exact_mut(n).zip(va.data().chunks_exact(k)) {
                    for (&av, b_row) in a_row.iter().zip(vb.data().chunks_exact(n)) {
                        axpy(out_row, av, b_row);
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            _ => {
                return Err(EngineError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} vs {:?}", va.dims(), vb.dims()),
                })
            }
        };
        self.record("matmul", value, Op::Matmul(a, b))
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 || vb.rank() != 1 || va.len() != vb.len() {
            return Err(EngineError::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", va.dims(), vb.dims()),
            });
        }
        let value = Tensor::scalar(dot_slices(va.data(), vb.data()));
        self.record("dot", value, Op::Dot(a, b))
    }

    // ── convolution and pooling ──

    /// Valid-padding 2-D cross-correlation. Input `[C,H,W]`, kernel
    /// `[F,C,kh,kw]`, output `[F,H',W']` with `H' = (H-kh)/stride + 1`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId, EngineError> {
        self.check_id(input)?;
        self.check_id(kernel)?;
        if stride == 0 {
            return Err(EngineError::InvalidArg { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (vi, vk) = (self.value(input), self.value(kernel));
        if vi.rank() != 3 || vk.rank() != 4 || vi.dims()[0] != vk.dims()[1] {
            return Err(EngineError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?} vs kernel {:?}", vi.dims(), vk.dims()),
            });
        }
        let (c_in, h, w) = (vi.dims()[0], vi.dims()[1], vi.dims()[2]);
        let (f_out, kh, kw) = (vk.dims()[0], vk.dims()[2], vk.dims()[3]);
        if kh > h || kw > w {
            return Err(EngineError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            });
        }
        let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let mut out = vec![0.0; f_out * ho * wo];
        for f in 0..f_out {
            let out_f = &mut out[f * ho * wo..(f + 1) * ho * wo];
            for c in 0..c_in {
                let in_c = &vi.data()[c * h * w..(c + 1) * h * w];
                let k_fc = &vk.data()[(f * c_in + c) * kh * kw..(f * c_in + c + 1) * kh * kw];
                for i in 0..ho {
                    let out_row = &mut out_f[i * wo..(i + 1) * wo];
                    for p in 0..kh {
                        let in_row = &in_c[(i * stride + p) * w..(i * stride + p + 1) * w];
                        for q in 0..kw {
                            let kv = k_fc[p * kw + q];
                            if stride == 1 {
                                axpy(out_row, kv, &in_row[q..q + wo]);
                            } else {
                                for (j, o) in out_row.iter_mut().enumerate() {
                                    *o += kv * in_row[j * stride + q];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![f_out, ho, wo], out)?;
        self.record("conv2d", value, Op::Conv2d { input, kernel, stride })
    }

    /// Non-overlapping max pooling with a square window; trailing rows and
    /// columns that do not fill a window are dropped. Ties keep the lowest
    /// input index.
    pub fn maxpool2d(&mut self, input: NodeId, window: usize) -> Result<NodeId, EngineError> {
        self.check_id(input)?;
        if window == 0 {
            return Err(EngineError::InvalidArg { op: "maxpool2d", detail: "window must be >= 1".into() });
        }
        let vi = self.value(input);
        if vi.rank() != 3 {
            return Err(EngineError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("expected [C,H,W], got {:?}", vi.dims()),
            });
        }
        let (c_in, h, w) = (vi.dims()[0], vi.dims()[1], vi.dims()[2]);
        let (ho, wo) = (h / window, w / window);
        if ho == 0 || wo == 0 {
            return Err(EngineError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("window {window} larger than input {h}x{w}"),
            });
        }
        let mut out = vec![0.0; c_in * ho * wo];
        let mut argmax = vec![0u32; c_in * ho * wo];
        for c in 0..c_in {
            let in_c = &vi.data()[c * h * w..(c + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for p in 0..window {
                        let row = (i * window + p) * w + j * window;
                        for (q, &v) in in_c[row..row + window].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_at = row + q;
                            }
                        }
                    }
                    out[(c * ho + i) * wo + j] = best;
                    argmax[(c * ho + i) * wo + j] = (c * h * w + best_at) as u32;
                }
            }
        }
        let value = Tensor::new(vec![c_in, ho, wo], out)?;
        self.record("maxpool2d", value, Op::MaxPool2d { input, argmax })
    }

    // ── pointwise nonlinearities ──

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        let value = Tensor::new(va.dims().to_vec(), va.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.record("relu", value, Op::Relu(a))
    }

    /// Natural logarithm; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        let value = Tensor::new(va.dims().to_vec(), va.data().iter().map(|&x| x.ln()).collect())?;
        self.record("log", value, Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        let value = Tensor::new(va.dims().to_vec(), va.data().iter().map(|&x| x.exp()).collect())?;
        self.record("exp", value, Op::Exp(a))
    }

    // ── shape and reductions ──

    pub fn reshape(&mut self, a: NodeId, dims: Vec<usize>) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        let volume: usize = dims.iter().product();
        if volume != va.len() {
            return Err(EngineError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} ({} values) to {:?} ({})", va.dims(), va.len(), dims, volume),
            });
        }
        let value = Tensor::new(dims, va.data().to_vec())?;
        self.record("reshape", value, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.record("sum", value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        if va.is_empty() {
            return Err(EngineError::InvalidArg { op: "mean", detail: "empty tensor".into() });
        }
        let value = Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        self.record("mean", value, Op::Mean(a))
    }

    /// Maximum over one axis; the reduced shape drops that axis. Ties keep
    /// the lowest index along the axis.
    pub fn max_over_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(EngineError::InvalidArg {
                op: "max_over_axis",
                detail: format!("axis {axis} out of range for rank {}", va.rank()),
            });
        }
        let dims = va.dims();
        let outer: usize = dims[..axis].iter().product();
        let reduce = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for r in 0..reduce {
                let base = (o * reduce + r) * inner;
                for i in 0..inner {
                    let v = va.data()[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = (base + i) as u32;
                    }
                }
            }
        }
        let mut out_dims = dims.to_vec();
        out_dims.remove(axis);
        let value = Tensor::new(out_dims, out)?;
        self.record("max_over_axis", value, Op::MaxOverAxis { input: a, argmax })
    }

    /// Euclidean norm over all elements.
    pub fn norm(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.check_id(a)?;
        let value = Tensor::scalar(self.value(a).data().iter().map(|&x| x * x).sum::<f64>().sqrt());
        self.record("norm", value, Op::Norm(a))
    }

    // ── differentiation ──

    /// Reverse pass from a scalar output; gradients for every node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, EngineError> {
        self.check_scalar(output)?;
        self.backward_impl(output, Tensor::scalar(1.0), None)
    }

    /// Reverse pass from a scalar output, restricted to the given leaves.
    /// Interior nodes still propagate; only the listed leaves get their
    /// gradient materialized, which skips dead weight-gradient work.
    pub fn gradient(&self, output: NodeId, wrt: &[NodeId]) -> Result<Gradients, EngineError> {
        self.check_scalar(output)?;
        for &id in wrt {
            self.check_id(id)?;
        }
        self.backward_impl(output, Tensor::scalar(1.0), Some(wrt))
    }

    /// Reverse pass from an arbitrary output seeded with `seed` (the
    /// vector-Jacobian product), restricted like [`Tape::gradient`].
    pub fn backward_seeded(
        &self,
        output: NodeId,
        seed: &Tensor,
        wrt: &[NodeId],
    ) -> Result<Gradients, EngineError> {
        self.check_id(output)?;
        if seed.dims() != self.value(output).dims() {
            return Err(EngineError::ShapeMismatch {
                op: "backward_seeded",
                detail: format!("seed {:?} vs output {:?}", seed.dims(), self.value(output).dims()),
            });
        }
        self.backward_impl(output, seed.clone(), Some(wrt))
    }

    /// Full Jacobian of a 1-D output w.r.t. one node, as `[E, D]`, computed
    /// as one seeded backward pass per output coordinate.
    pub fn jacobian(&self, output: NodeId, wrt: NodeId) -> Result<Tensor, EngineError> {
        self.check_id(output)?;
        self.check_id(wrt)?;
        let e_dim = self.value(output).len();
        if self.value(output).rank() != 1 {
            return Err(EngineError::ShapeMismatch {
                op: "jacobian",
                detail: format!("output must be 1-D, got {:?}", self.value(output).dims()),
            });
        }
        let d_dim = self.value(wrt).len();
        let mut rows = vec![0.0; e_dim * d_dim];
        for e in 0..e_dim {
            let mut seed = Tensor::zeros(self.value(output).dims());
            seed.data_mut()[e] = 1.0;
            let mut grads = self.backward_impl(output, seed, Some(&[wrt]))?;
            if let Some(g) = grads.take(wrt) {
                rows[e * d_dim..(e + 1) * d_dim].copy_from_slice(g.data());
            }
        }
        Tensor::new(vec![e_dim, d_dim], rows)
    }

    fn check_scalar(&self, output: NodeId) -> Result<(), EngineError> {
        self.check_id(output)?;
        let v = self.value(output);
        if !v.is_scalar() {
            return Err(EngineError::NonScalarOutput { dims: v.dims().to_vec() });
        }
        Ok(())
    }

    fn backward_impl(
        &self,
        output: NodeId,
        seed: Tensor,
        wrt: Option<&[NodeId]>,
    ) -> Result<Gradients, EngineError> {
        let wanted: Option<Vec<bool>> = wrt.map(|ids| {
            let mut w = vec![false; self.nodes.len()];
            for id in ids {
                w[id.0] = true;
            }
            w
        });
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(seed.into_data());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, wanted.as_deref())?;
            grads[i] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::new(self.nodes[i].value.dims().to_vec(), data).unwrap()))
            .collect();
        Ok(Gradients { grads: tensors })
    }

    /// True when `id`'s gradient must be materialized: every interior node
    /// (it still propagates), and leaves only when requested.
    fn needs_grad(&self, id: NodeId, wanted: Option<&[bool]>) -> bool {
        match self.nodes[id.0].op {
            Op::Leaf => wanted.map_or(true, |w| w[id.0]),
            _ => true,
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        wanted: Option<&[bool]>,
    ) -> Result<(), EngineError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a, wanted) {
                    match broadcast_kind(va, vb).unwrap() {
                        Broadcast::ScalarLeft => accumulate("add", grads, a.0, vec![g.iter().sum()])?,
                        _ => accumulate("add", grads, a.0, g.to_vec())?,
                    }
                }
                if self.needs_grad(*b, wanted) {
                    let contribution = match broadcast_kind(va, vb).unwrap() {
                        Broadcast::Same => g.to_vec(),
                        Broadcast::ScalarRight => vec![g.iter().sum()],
                        Broadcast::ScalarLeft => g.to_vec(),
                        Broadcast::ChannelRight => channel_sums(g, va.dims()),
                    };
                    accumulate("add", grads, b.0, contribution)?;
                }
                Ok(())
            }
            Op::Sub(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a, wanted) {
                    match broadcast_kind(va, vb).unwrap() {
                        Broadcast::ScalarLeft => accumulate("sub", grads, a.0, vec![g.iter().sum()])?,
                        _ => accumulate("sub", grads, a.0, g.to_vec())?,
                    }
                }
                if self.needs_grad(*b, wanted) {
                    let contribution = match broadcast_kind(va, vb).unwrap() {
                        Broadcast::Same => g.iter().map(|&x| -x).collect(),
                        Broadcast::ScalarRight => vec![-g.iter().sum::<f64>()],
                        Broadcast::ScalarLeft => g.iter().map(|&x| -x).collect(),
                        Broadcast::ChannelRight => channel_sums(g, va.dims()).iter().map(|&x| -x).collect(),
                    };
                    accumulate("sub", grads, b.0, contribution)?;
                }
                Ok(())
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind(va, vb).unwrap();
                if self.needs_grad(*a, wanted) {
                    let contribution = match kind {
                        Broadcast::Same => g.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                        Broadcast::ScalarRight => {
                            let s = vb.item();
                            g.iter().map(|&x| x * s).collect()
                        }
                        Broadcast::ScalarLeft => vec![dot_slices(g, vb.data())],
                        Broadcast::ChannelRight => {
                            let plane = va.dims()[1] * va.dims()[2];
                            let mut out = Vec::with_capacity(g.len());
                            for (c, chunk) in g.chunks_exact(plane).enumerate() {
                                let s = vb.data()[c];
                                out.extend(chunk.iter().map(|&x| x * s));
                            }
                            out
                        }
                    };
                    accumulate("mul", grads, a.0, contribution)?;
                }
                if self.needs_grad(*b, wanted) {
                    let contribution = match kind {
                        Broadcast::Same => g.iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                        Broadcast::ScalarRight => vec![dot_slices(g, va.data())],
                        Broadcast::ScalarLeft => {
                            let s = va.item();
                            g.iter().map(|&x| x * s).collect()
                        }
                        Broadcast::ChannelRight => {
                            let plane = va.dims()[1] * va.dims()[2];
                            g.chunks_exact(plane)
                                .zip(va.data().chunks_exact(plane))
                                .map(|(gc, ac)| dot_slices(gc, ac))
                                .collect()
                        }
                    };
                    accumulate("mul", grads, b.0, contribution)?;
                }
                Ok(())
            }
            Op::AddConst(a) => {
                if self.needs_grad(*a, wanted) {
                    accumulate("add_scalar", grads, a.0, g.to_vec())?;
                }
                Ok(())
            }
            Op::MulConst(a, c) => {
                if self.needs_grad(*a, wanted) {
                    accumulate("scale", grads, a.0, g.iter().map(|&x| x * c).collect())?;
                }
                Ok(())
            }
            Op::Matmul(a, b) => self.backprop_matmul(*a, *b, g, grads, wanted),
            Op::Conv2d { input, kernel, stride } => {
                self.backprop_conv2d(*input, *kernel, *stride, g, grads, wanted)
            }
            Op::MaxPool2d { input, argmax, .. } => {
                if self.needs_grad(*input, wanted) {
                    let mut d_in = vec![0.0; self.value(*input).len()];
                    for (&at, &gv) in argmax.iter().zip(g) {
                        d_in[at as usize] += gv;
                    }
                    accumulate("maxpool2d", grads, input.0, d_in)?;
                }
                Ok(())
            }
            Op::Relu(a) => {
                if self.needs_grad(*a, wanted) {
                    let va = self.value(*a);
                    let contribution =
                        g.iter().zip(va.data()).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect();
                    accumulate("relu", grads, a.0, contribution)?;
                }
                Ok(())
            }
            Op::Reshape(a) => {
                if self.needs_grad(*a, wanted) {
                    accumulate("reshape", grads, a.0, g.to_vec())?;
                }
                Ok(())
            }
            Op::Sum(a) => {
                if self.needs_grad(*a, wanted) {
                    accumulate("sum", grads, a.0, vec![g[0]; self.value(*a).len()])?;
                }
                Ok(())
            }
            Op::Mean(a) => {
                if self.needs_grad(*a, wanted) {
                    let n = self.value(*a).len();
                    accumulate("mean", grads, a.0, vec![g[0] / n as f64; n])?;
                }
                Ok(())
            }
            Op::Log(a) => {
                if self.needs_grad(*a, wanted) {
                    let va = self.value(*a);
                    let contribution = g.iter().zip(va.data()).map(|(&gv, &x)| gv / x).collect();
                    accumulate("log", grads, a.0, contribution)?;
                }
                Ok(())
            }
            Op::Exp(a) => {
                if self.needs_grad(*a, wanted) {
                    let out = &node.value;
                    let contribution = g.iter().zip(out.data()).map(|(&gv, &e)| gv * e).collect();
                    accumulate("exp", grads, a.0, contribution)?;
                }
                Ok(())
            }
            Op::MaxOverAxis { input, argmax } => {
                if self.needs_grad(*input, wanted) {
                    let mut d_in = vec![0.0; self.value(*input).len()];
                    for (&at, &gv) in argmax.iter().zip(g) {
                        d_in[at as usize] += gv;
                    }
                    accumulate("max_over_axis", grads, input.0, d_in)?;
                }
                Ok(())
            }
            Op::Norm(a) => {
                if self.needs_grad(*a, wanted) {
                    let va = self.value(*a);
                    let n = node.value.item();
                    let contribution = if n == 0.0 {
                        vec![0.0; va.len()]
                    } else {
                        let s = g[0] / n;
                        va.data().iter().map(|&x| s * x).collect()
                    };
                    accumulate("norm", grads, a.0, contribution)?;
                }
                Ok(())
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a, wanted) {
                    accumulate("dot", grads, a.0, vb.data().iter().map(|&y| g[0] * y).collect())?;
                }
                if self.needs_grad(*b, wanted) {
                    accumulate("dot", grads, b.0, va.data().iter().map(|&x| g[0] * x).collect())?;
                }
                Ok(())
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: NodeId,
        b: NodeId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        wanted: Option<&[bool]>,
    ) -> Result<(), EngineError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.dims()[0], va.dims()[1]);
        if vb.rank() == 1 {
            // out[m] = A·x: dA = g ⊗ x, dx = Aᵀ·g
            if self.needs_grad(a, wanted) {
                let mut d_a = vec![0.0; m * k];
                for (d_row, &gv) in d_a.chunks_exact_mut(k).zip(g) {
                    axpy(d_row, gv, vb.data());
                }
                accumulate("matmul", grads, a.0, d_a)?;
            }
            if self.needs_grad(b, wanted) {
                let mut d_b = vec![0.0; k];
                for (a_row, &gv) in va.data().chunks_exact(k).zip(g) {
                    axpy(&mut d_b, gv, a_row);
                }
                accumulate("matmul", grads, b.0, d_b)?;
            }
        } else {
            let n = vb.dims()[1];
            // dA = G·Bᵀ, dB = Aᵀ·G
            if self.needs_grad(a, wanted) {
                let mut d_a = vec![0.0; m * k];
                for (d_row, g_row) in d_a.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
                    for (dv, b_row) in d_row.iter_mut().zip(vb.data().chunks_exact(n)) {
                        *dv = dot_slices(g_row, b_row);
                    }
                }
                accumulate("matmul", grads, a.0, d_a)?;
            }
            if self.needs_grad(b, wanted) {
                let mut d_b = vec![0.0; k * n];
                for (a_row, g_row) in va.data().chunks_exact(k).zip(g.chunks_exact(n)) {
                    for (&av, d_row) in a_row.iter().zip(d_b.chunks_exact_mut(n)) {
                        axpy(d_row, av, g_row);
                    }
                }
                accumulate("matmul", grads, b.0, d_b)?;
            }
        }
        Ok(())
    }

    fn backprop_conv2d(
        &self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        wanted: Option<&[bool]>,
    ) -> Result<(), EngineError> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        let (c_in, h, w) = (vi.dims()[0], vi.dims()[1], vi.dims()[2]);
        let (f_out, kh, kw) = (vk.dims()[0], vk.dims()[2], vk.dims()[3]);
        let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let need_in = self.needs_grad(input, wanted);
        let need_k = self.needs_grad(kernel, wanted);
        if !need_in && !need_k {
            return Ok(());
        }
        let mut d_in = if need_in { vec![0.0; vi.len()] } else { Vec::new() };
        let mut d_k = if need_k { vec![0.0; vk.len()] } else { Vec::new() };
        for f in 0..f_out {
            let g_f = &g[f * ho * wo..(f + 1) * ho * wo];
            for c in 0..c_in {
                let in_c = &vi.data()[c * h * w..(c + 1) * h * w];
                let k_fc = &vk.data()[(f * c_in + c) * kh * kw..(f * c_in + c + 1) * kh * kw];
                let dk_base = (f * c_in + c) * kh * kw;
                for i in 0..ho {
                    let g_row = &g_f[i * wo..(i + 1) * wo];
                    for p in 0..kh {
                        let in_row_at = (i * stride + p) * w;
                        for q in 0..kw {
                            let kv = k_fc[p * kw + q];
                            if stride == 1 {
                                if need_in {
                                    let d_row = &mut d_in[c * h * w + in_row_at + q..][..wo];
                                    axpy(d_row, kv, g_row);
                                }
                                if need_k {
                                    d_k[dk_base + p * kw + q] +=
                                        dot_slices(g_row, &in_c[in_row_at + q..in_row_at + q + wo]);
                                }
                            } else {
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let at = in_row_at + j * stride + q;
                                    if need_in {
                                        d_in[c * h * w + at] += kv * gv;
                                    }
                                    if need_k {
                                        d_k[dk_base + p * kw + q] += gv * in_c[at];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_in {
            accumulate("conv2d", grads, input.0, d_in)?;
        }
        if need_k {
            accumulate("conv2d", grads, kernel.0, d_k)?;
        }
        Ok(())
    }
}

enum Broadcast {
    Same,
    ScalarLeft,
    ScalarRight,
    ChannelRight,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.dims() == b.dims() {
        Some(Broadcast::Same)
    } else if b.rank() == 0 {
        Some(Broadcast::ScalarRight)
    } else if a.rank() == 0 {
        Some(Broadcast::ScalarLeft)
    } else if a.rank() == 3 && b.rank() == 1 && b.dims()[0] == a.dims()[0] {
        Some(Broadcast::ChannelRight)
    } else {
        None
    }
}

/// Per-channel sums of a `[F,H,W]` gradient, for the bias-broadcast backward.
fn channel_sums(g: &[f64], dims: &[usize]) -> Vec<f64> {
    let plane = dims[1] * dims[2];
    g.chunks_exact(plane).map(|c| c.iter().sum()).collect()
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Adds `contribution` into the running gradient of node `at`, refusing
/// non-finite values so a poisoned backward pass names its primitive.
fn accumulate(
    op: &'static str,
    grads: &mut [Option<Vec<f64>>],
    at: usize,
    contribution: Vec<f64>,
) -> Result<(), EngineError> {
    if !contribution.iter().all(|v| v.is_finite()) {
        return Err(EngineError::NonFinite { op, phase: Phase::Backward });
    }
    match &mut grads[at] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(contribution) {
                *a += v;
            }
        }
        slot => *slot = Some(contribution),
    }
    Ok(())
}
