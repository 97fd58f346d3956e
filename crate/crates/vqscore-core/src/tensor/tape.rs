use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor, TensorError};

/// Layer-norm epsilon. Fixed; not a tunable.
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<F: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MeanAxis(NodeId, usize),
    MeanAll(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // cached by the forward pass for the backward formulas
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout {
        x: NodeId,
        scale: F,
        mask: Vec<bool>,
    },
    Reshape(NodeId),
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to the tape's `requires_grad`
/// leaves. Leaves the root does not depend on map to zero tensors.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    map: HashMap<NodeId, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<F>)> {
        self.map.iter().map(|(id, t)| (*id, t))
    }
}

/// Eager reverse-mode differentiation tape over [`Tensor`] values.
///
/// Node construction is the forward pass: each op validates shapes, computes
/// its value immediately, and records enough to replay the chain rule in
/// reverse. Graphs are confined to one thread; trained tensors extracted from
/// a tape are plain data and freely shareable.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    dropout_rng: Option<ChaCha8Rng>,
    grad_leaves: Vec<NodeId>,
}

impl<F: Scalar> Tape<F> {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            dropout_rng: None,
            grad_leaves: Vec::new(),
        }
    }

    /// Train-mode tape: dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            dropout_rng: Some(rng),
            grad_leaves: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Hands the dropout RNG back so a caller can thread one stream through
    /// several consecutive tapes.
    pub fn into_dropout_rng(self) -> Option<ChaCha8Rng> {
        self.dropout_rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a tensor as a graph leaf. `tensor.requires_grad` decides whether
    /// [`Tape::backward`] reports a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> NodeId {
        let needs_grad = tensor.requires_grad;
        let id = self.push(Op::Leaf, tensor, needs_grad);
        if needs_grad {
            self.grad_leaves.push(id);
        }
        id
    }

    /// Non-differentiable scalar constant.
    pub fn constant(&mut self, v: F) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// The cached forward value of `root`. Values are computed eagerly at
    /// node-construction time, so this is a lookup, not a re-evaluation.
    pub fn forward(&self, root: NodeId) -> &Tensor<F> {
        self.value(root)
    }

    pub fn item(&self, id: NodeId) -> Result<F, TensorError> {
        self.value(id).item()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_2d(va.data(), vb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + c` for a constant scalar, via a broadcast const leaf.
    pub fn add_scalar(&mut self, a: NodeId, c: F) -> Result<NodeId, TensorError> {
        let k = self.constant(c);
        self.add(a, k)
    }

    /// `a * c` for a constant scalar, via a broadcast const leaf.
    pub fn mul_scalar(&mut self, a: NodeId, c: F) -> Result<NodeId, TensorError> {
        let k = self.constant(c);
        self.mul(a, k)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, va.shape(), vb.shape())?;
        let out = match kind {
            Broadcast::Same => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Broadcast::RhsScalar => {
                let y = vb.data()[0];
                va.data().iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::RhsRow => {
                let cols = vb.numel();
                va.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb.data()[i % cols]))
                    .collect()
            }
        };
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, Tensor::from_parts(shape, out), needs))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "mean_axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        if shape[axis] == 0 {
            return Err(TensorError::invalid("mean_axis", "mean over empty axis"));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let inv = F::one() / F::from_f64(len as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + v.data()[(o * len + j) * inner + i];
                }
            }
        }
        for e in out.iter_mut() {
            *e = *e * inv;
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(
            Op::MeanAxis(x, axis),
            Tensor::from_parts(out_shape, out),
            needs,
        ))
    }

    /// Mean of all elements; yields a `[1]` scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::invalid("mean_all", "mean of empty tensor"));
        }
        let inv = F::one() / F::from_f64(v.numel() as f64);
        let s: F = v.data().iter().copied().sum();
        let needs = self.needs(x);
        Ok(self.push(Op::MeanAll(x), Tensor::scalar(s * inv), needs))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = vec![F::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let len = v.shape()[axis];
            for o in 0..outer {
                for j in 0..len {
                    let src = (o * len + j) * inner;
                    let dst = (o * axis_total + offset + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&v.data()[src..src + inner]);
                }
            }
            offset += len;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Concat(parts.to_vec(), axis),
            Tensor::from_parts(out_shape, out),
            needs,
        ))
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let sub = end - start;
        let mut out = vec![F::zero(); outer * sub * inner];
        for o in 0..outer {
            for j in 0..sub {
                let src = (o * len + start + j) * inner;
                let dst = (o * sub + j) * inner;
                out[dst..dst + inner].copy_from_slice(&v.data()[src..src + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = sub;
        let needs = self.needs(x);
        Ok(self.push(
            Op::Slice { x, axis, start },
            Tensor::from_parts(out_shape, out),
            needs,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let shape = v.shape();
        if shape.len() != 2 {
            return Err(TensorError::invalid(
                "transpose",
                format!("rank-2 tensor required, got shape {shape:?}"),
            ));
        }
        let (r, c) = (shape[0], shape[1]);
        let out = transpose_2d(v.data(), r, c);
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x), Tensor::from_parts(vec![c, r], out), needs))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .map(|&e| if e > F::zero() { e } else { F::zero() })
            .collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Relu(x), Tensor::from_parts(shape, out), needs))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| sigmoid_scalar(e)).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Sigmoid(x), Tensor::from_parts(shape, out), needs))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let shape = v.shape();
        let cols = *shape.last().ok_or_else(|| {
            TensorError::invalid("softmax", "rank-0 input")
        })?;
        if cols == 0 {
            return Err(TensorError::invalid("softmax", "empty last axis"));
        }
        let mut out = vec![F::zero(); v.numel()];
        for (row_out, row_in) in out.chunks_mut(cols).zip(v.data().chunks(cols)) {
            let max = row_in.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &e) in row_out.iter_mut().zip(row_in) {
                let ex = (e - max).exp();
                *o = ex;
                sum = sum + ex;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let shape = shape.to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxLast(x), Tensor::from_parts(shape, out), needs))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "rank-0 input"))?;
        if cols == 0 {
            return Err(TensorError::invalid("layer_norm", "empty last axis"));
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.shape() != [cols] || b.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: g.shape().to_vec(),
            });
        }
        let rows = v.numel() / cols;
        let eps = F::from_f64(LAYER_NORM_EPS);
        let inv_n = F::one() / F::from_f64(cols as f64);
        let mut xhat = vec![F::zero(); v.numel()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row
                .iter()
                .map(|&e| (e - mean) * (e - mean))
                .sum::<F>()
                * inv_n;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let h = (row[c] - mean) * istd;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor::from_parts(shape, out),
            needs,
        ))
    }

    /// Inverted dropout: keep with probability `1-p`, scale kept values by
    /// `1/(1-p)`. On an inference tape this is the identity (no node).
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid(
                "dropout",
                format!("rate {p} outside [0, 1)"),
            ));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let numel = self.nodes[x.0].value.numel();
        let mask: Vec<bool> = (0..numel).map(|_| rng.gen::<f64>() >= p).collect();
        let scale = F::from_f64(1.0 / (1.0 - p));
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .zip(&mask)
            .map(|(&e, &keep)| if keep { e * scale } else { F::zero() })
            .collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Op::Dropout { x, scale, mask },
            Tensor::from_parts(shape, out),
            needs,
        ))
    }

    /// Shape reinterpretation; element count must be preserved. Structural
    /// only — values and gradients pass through untouched.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::from_parts(shape, v.data().to_vec());
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), out, needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Gradients accumulate additively over
    /// every path, so a leaf used twice receives the sum of both
    /// contributions.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<F>, TensorError> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                op: "backward",
                shape: root_value.shape().to_vec(),
            });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![F::one()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let contribs = self.node_backward(i);
            for (parent, contrib) in contribs {
                let pnode = &mut self.nodes[parent.0];
                match pnode.grad.as_mut() {
                    Some(g) => {
                        for (acc, c) in g.iter_mut().zip(&contrib) {
                            *acc = *acc + *c;
                        }
                    }
                    None => pnode.grad = Some(contrib),
                }
            }
        }

        let mut map = HashMap::new();
        for &leaf in &self.grad_leaves {
            let node = &self.nodes[leaf.0];
            let shape = node.value.shape().to_vec();
            let grad = match &node.grad {
                Some(g) => Tensor::from_parts(shape, g.clone()),
                None => Tensor::zeros(shape),
            };
            map.insert(leaf, grad);
        }
        Ok(Gradients { map })
    }

    /// Gradient of the node at `i` pushed to each parent that needs one.
    fn node_backward(&self, i: usize) -> Vec<(NodeId, Vec<F>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("grad present");
        let mut out: Vec<(NodeId, Vec<F>)> = Vec::new();
        let mut emit = |id: NodeId, grad: Vec<F>| {
            if self.nodes[id.0].needs_grad {
                out.push((id, grad));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    // dA = g · Bᵀ
                    let bt = transpose_2d(vb.data(), k, n);
                    emit(*a, matmul_2d(g, &bt, m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · g
                    let at = transpose_2d(va.data(), m, k);
                    emit(*b, matmul_2d(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                let kind = self.binary_kind(*a, *b);
                if self.nodes[a.0].needs_grad {
                    emit(*a, g.clone());
                }
                if self.nodes[b.0].needs_grad {
                    emit(*b, reduce_to_rhs(g, kind, self.value(*b).numel(), |x| x));
                }
            }
            Op::Sub(a, b) => {
                let kind = self.binary_kind(*a, *b);
                if self.nodes[a.0].needs_grad {
                    emit(*a, g.clone());
                }
                if self.nodes[b.0].needs_grad {
                    emit(
                        *b,
                        reduce_to_rhs(g, kind, self.value(*b).numel(), |x| -x),
                    );
                }
            }
            Op::Mul(a, b) => {
                let kind = self.binary_kind(*a, *b);
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let da = match kind {
                        Broadcast::Same => {
                            g.iter().zip(vb.data()).map(|(&gi, &y)| gi * y).collect()
                        }
                        Broadcast::RhsScalar => {
                            let y = vb.data()[0];
                            g.iter().map(|&gi| gi * y).collect()
                        }
                        Broadcast::RhsRow => {
                            let cols = vb.numel();
                            g.iter()
                                .enumerate()
                                .map(|(idx, &gi)| gi * vb.data()[idx % cols])
                                .collect()
                        }
                    };
                    emit(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let weighted: Vec<F> = g
                        .iter()
                        .zip(va.data())
                        .map(|(&gi, &x)| gi * x)
                        .collect();
                    emit(*b, reduce_to_rhs(&weighted, kind, vb.numel(), |x| x));
                }
            }
            Op::MeanAxis(x, axis) => {
                let shape = self.value(*x).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let inv = F::one() / F::from_f64(len as f64);
                let mut dx = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for c in 0..inner {
                            dx[(o * len + j) * inner + c] = g[o * inner + c] * inv;
                        }
                    }
                }
                emit(*x, dx);
            }
            Op::MeanAll(x) => {
                let numel = self.value(*x).numel();
                let gi = g[0] / F::from_f64(numel as f64);
                emit(*x, vec![gi; numel]);
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![F::zero(); outer * len * inner];
                        for o in 0..outer {
                            for j in 0..len {
                                let src = (o * total + offset + j) * inner;
                                let dst = (o * len + j) * inner;
                                dp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        emit(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, .. } => {
                let in_shape = self.value(*x).shape();
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let sub = node.value.shape()[*axis];
                let mut dx = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..sub {
                        let dst = (o * len + start + j) * inner;
                        let src = (o * sub + j) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                emit(*x, dx);
            }
            Op::Transpose(x) => {
                let out_shape = node.value.shape();
                emit(*x, transpose_2d(g, out_shape[0], out_shape[1]));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let dx = g
                    .iter()
                    .zip(vx.data())
                    .map(|(&gi, &e)| if e > F::zero() { gi } else { F::zero() })
                    .collect();
                emit(*x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (F::one() - yi))
                    .collect();
                emit(*x, dx);
            }
            Op::SoftmaxLast(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![F::zero(); y.len()];
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: F = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                emit(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = *node.value.shape().last().unwrap();
                let rows = xhat.len() / cols;
                let gv = self.value(*gamma);
                let inv_n = F::one() / F::from_f64(cols as f64);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![F::zero(); xhat.len()];
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let mut sum1 = F::zero();
                        let mut sum2 = F::zero();
                        for c in 0..cols {
                            let dh = gs[c] * gv.data()[c];
                            sum1 = sum1 + dh;
                            sum2 = sum2 + dh * h[c];
                        }
                        for c in 0..cols {
                            let dh = gs[c] * gv.data()[c];
                            dx[r * cols + c] =
                                inv_std[r] * (dh - (sum1 + h[c] * sum2) * inv_n);
                        }
                    }
                    emit(*x, dx);
                }
                if self.nodes[gamma.0].needs_grad {
                    let mut dg = vec![F::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] = dg[c] + g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    emit(*gamma, dg);
                }
                if self.nodes[beta.0].needs_grad {
                    let mut db = vec![F::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] = db[c] + g[r * cols + c];
                        }
                    }
                    emit(*beta, db);
                }
            }
            Op::Dropout { x, scale, mask } => {
                let dx = g
                    .iter()
                    .zip(mask)
                    .map(|(&gi, &keep)| if keep { gi * *scale } else { F::zero() })
                    .collect();
                emit(*x, dx);
            }
            Op::Reshape(x) => emit(*x, g.clone()),
        }
        out
    }

    fn binary_kind(&self, a: NodeId, b: NodeId) -> Broadcast {
        broadcast_kind("", self.value(a).shape(), self.value(b).shape())
            .expect("validated at construction")
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs has a single element.
    RhsScalar,
    /// lhs is `[r, c]`, rhs is `[c]`: rhs applied to every row.
    RhsRow,
}

fn broadcast_kind(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Broadcast, TensorError> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if rhs.iter().product::<usize>() == 1 {
        return Ok(Broadcast::RhsScalar);
    }
    if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        return Ok(Broadcast::RhsRow);
    }
    Err(TensorError::ShapeMismatch {
        op: if op.is_empty() { "binary" } else { op },
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Collapses an output-shaped gradient onto the rhs operand of a broadcast
/// binary op, applying `f` elementwise (used to negate for `sub`).
fn reduce_to_rhs<F: Scalar>(
    g: &[F],
    kind: Broadcast,
    rhs_numel: usize,
    f: impl Fn(F) -> F,
) -> Vec<F> {
    match kind {
        Broadcast::Same => g.iter().map(|&x| f(x)).collect(),
        Broadcast::RhsScalar => {
            let s: F = g.iter().copied().sum();
            vec![f(s)]
        }
        Broadcast::RhsRow => {
            let mut out = vec![F::zero(); rhs_numel];
            for (i, &gi) in g.iter().enumerate() {
                out[i % rhs_numel] = out[i % rhs_numel] + gi;
            }
            out.iter().map(|&x| f(x)).collect()
        }
    }
}

/// Splits `shape` at `axis` into (product before, extent, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn matmul_2d<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = p * n;
            let dst = i * n;
            for j in 0..n {
                out[dst + j] = out[dst + j] + av * b[row + j];
            }
        }
    }
    out
}

pub(crate) fn transpose_2d<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn leaf(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn scalar_product_forward_and_backward() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1], vec![2.0]);
        let b = leaf(&mut tape, vec![1], vec![3.0]);
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.item(y).unwrap(), 6.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn mean_forward_and_uniform_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.mean_all(x).unwrap();
        assert_eq!(tape.item(y).unwrap(), 2.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_of_uniform_input_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, -30.0]).unwrap(),
        );
        let y = tape.softmax_last(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_over_shared_leaf() {
        // y = x·x + x  →  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarRoot { .. }));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dropout_identity_in_inference_mode() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.dropout(x, 0.5).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_deterministic_under_fixed_seed() {
        let run = || {
            let mut tape = Tape::<f64>::training(ChaCha8Rng::seed_from_u64(11));
            let x = tape.leaf(Tensor::new(vec![64], vec![1.0; 64]).unwrap());
            let y = tape.dropout(x, 0.3).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        assert_eq!(a, run());
        // inverted dropout: kept entries are scaled up
        assert!(a.iter().any(|&v| v == 0.0));
        assert!(a
            .iter()
            .filter(|&&v| v != 0.0)
            .all(|&v| (v - 1.0 / 0.7).abs() < 1e-12));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        let back = tape.slice(c, 0, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(col).data(), &[2.0, 4.0, 6.0]);
    }
}
