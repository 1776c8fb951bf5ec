//! Reverse-mode tape.
//!
//! Ops append [`Node`]s in topological order (parents always precede
//! children), so one reverse walk propagates adjoints. Every op validates
//! shapes and rejects non-finite outputs at the point of production —
//! NaN/Inf never propagate silently. A tape differentiates once:
//! [`Tape::backward`] (or [`Tape::grad_multi`]) consumes it, and any
//! further recording or differentiation errors until a fresh forward pass
//! builds a new tape. Node values stay readable after consumption.

use super::{ensure_finite, numel_of, Tensor};
use crate::error::{DsaError, Result};

/// Handle to a tape node. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive term inside layer-norm's variance; small enough that
/// normalized rows keep unit variance to ~1e-8.
pub const LN_EPS: f64 = 1e-8;

enum Op {
    Leaf { requires_grad: bool },
    Matmul { a: NodeId, b: NodeId },
    /// Batched matmul over the leading axis; `transpose_b` multiplies by
    /// the per-slice transpose of `b` without materializing it.
    Bmm { a: NodeId, b: NodeId, transpose_b: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// `b`'s shape is a trailing suffix of `a`'s; `b` is repeated over the
    /// leading axes (bias and positional-embedding adds).
    AddBcast { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `s` has `a`'s shape minus the last axis; each length-D row of `a`
    /// is scaled by its scalar from `s` (per-row normalization).
    MulBcastLast { a: NodeId, s: NodeId },
    Scale { a: NodeId, c: f64 },
    Affine { a: NodeId, k: f64 },
    Reshape { a: NodeId },
    Permute { a: NodeId, axes: Vec<usize> },
    /// Stacks `count` copies of `a` along a new leading axis.
    RepeatLead { a: NodeId, count: usize },
    Concat2 { a: NodeId, b: NodeId, axis: usize },
    /// Index one position along `axis`, dropping that axis.
    Select { a: NodeId, axis: usize, index: usize },
    Softmax { a: NodeId },
    Gelu { a: NodeId },
    /// stats holds (mean, rstd) per normalized row for the backward pass.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: Vec<f64> },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    /// Folds the trailing `reduced` axes by summation.
    SumLast { a: NodeId, reduced: usize },
    /// Per-example CE of logits rows against integer targets; probs holds
    /// the softmax for the backward pass.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    ClampMax { a: NodeId, cap: f64 },
    Sqrt { a: NodeId },
    Ln { a: NodeId },
    Recip { a: NodeId },
    /// Identity forward; backward multiplies the adjoint by −lambda.
    GradReverse { a: NodeId, lambda: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by a backward sweep, indexed by [`NodeId`].
pub struct Grads {
    adj: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer for `id`, if the sweep reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.adj.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.adj.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// C(m,n) = alpha·op(A)·op(B) + beta·C for row-major buffers; `ta`/`tb`
/// say the stored buffer is the transpose of the logical operand.
#[allow(clippy::too_many_arguments)]
fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[o] = in[map(o)] (or += for backward) where map permutes axes.
fn permute_walk(in_shape: &[usize], axes: &[usize], src: &[f64], dst: &mut [f64], backward: bool) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let os: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    let total: usize = out_shape.iter().product();
    for o in 0..total {
        if backward {
            dst[in_off] += src[o];
        } else {
            dst[o] = src[in_off];
        }
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_off += os[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            in_off -= os[d] * out_shape[d];
        }
    }
}

fn tanh_gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn tanh_gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(DsaError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node invariants guarantee validity")
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(DsaError::Shape {
                op: "scalar_value",
                detail: format!("node has shape {:?}, expected a single element", n.shape),
            });
        }
        Ok(n.data[0])
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let Tensor { shape, data } = t;
        self.nodes.push(Node { shape, data, op: Op::Leaf { requires_grad }, needs_grad: requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient (inputs, masks, frozen params).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<NodeId> {
        ensure_finite(name, &data)?;
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::Matmul { a, b }
            | Op::Bmm { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::AddBcast { a, b }
            | Op::Mul { a, b }
            | Op::MulBcastLast { a, s: b }
            | Op::Concat2 { a, b, .. } => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.nodes[x.0].needs_grad || self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad
            }
            Op::Scale { a, .. }
            | Op::Affine { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::RepeatLead { a, .. }
            | Op::Select { a, .. }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::MeanAll { a }
            | Op::SumAll { a }
            | Op::SumLast { a, .. }
            | Op::CrossEntropy { logits: a, .. }
            | Op::ClampMax { a, .. }
            | Op::Sqrt { a }
            | Op::Ln { a }
            | Op::Recip { a }
            | Op::GradReverse { a, .. } => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { shape, data, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(DsaError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    // ---- elementwise and arithmetic ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", self.nodes[a.0].shape.clone(), data, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", self.nodes[a.0].shape.clone(), data, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", self.nodes[a.0].shape.clone(), data, Op::Mul { a, b })
    }

    /// a + b with b's shape a trailing suffix of a's shape.
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb.as_slice() {
            return Err(DsaError::Shape {
                op: "add_bcast",
                detail: format!("{sb:?} is not a trailing suffix of {sa:?}"),
            });
        }
        let bn = self.nodes[b.0].data.len();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.nodes[b.0].data[i % bn])
            .collect();
        self.push("add_bcast", self.nodes[a.0].shape.clone(), data, Op::AddBcast { a, b })
    }

    /// a ∘ s where s carries one scalar per length-D trailing row of a.
    pub fn mul_bcast_last(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, ss) = (&self.nodes[a.0].shape, &self.nodes[s.0].shape);
        if sa.is_empty() || &sa[..sa.len() - 1] != ss.as_slice() {
            return Err(DsaError::Shape {
                op: "mul_bcast_last",
                detail: format!("{ss:?} must equal {sa:?} minus its last axis"),
            });
        }
        let d = *sa.last().unwrap();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.nodes[s.0].data[i / d])
            .collect();
        self.push("mul_bcast_last", self.nodes[a.0].shape.clone(), data, Op::MulBcastLast { a, s })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push("scale", self.nodes[a.0].shape.clone(), data, Op::Scale { a, c })
    }

    /// k·a + c elementwise.
    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| k * x + c).collect();
        self.push("affine", self.nodes[a.0].shape.clone(), data, Op::Affine { a, k })
    }

    pub fn clamp_max(&mut self, a: NodeId, cap: f64) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.min(cap)).collect();
        self.push("clamp_max", self.nodes[a.0].shape.clone(), data, Op::ClampMax { a, cap })
    }

    /// Elementwise square root; the derivative at exactly zero is taken
    /// as the subgradient 0 so coincident alignment rows stay finite.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        self.push("sqrt", self.nodes[a.0].shape.clone(), data, Op::Sqrt { a })
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        self.push("ln", self.nodes[a.0].shape.clone(), data, Op::Ln { a })
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| 1.0 / x).collect();
        self.push("recip", self.nodes[a.0].shape.clone(), data, Op::Recip { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| tanh_gelu(x)).collect();
        self.push("gelu", self.nodes[a.0].shape.clone(), data, Op::Gelu { a })
    }

    /// Identity whose backward multiplies the adjoint by −lambda
    /// (gradient-reversal layer).
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> Result<NodeId> {
        self.check_live()?;
        let data = self.nodes[a.0].data.clone();
        self.push("grad_reverse", self.nodes[a.0].shape.clone(), data, Op::GradReverse { a, lambda })
    }

    // ---- structural ops ----

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check_live()?;
        if numel_of(&shape) != self.nodes[a.0].data.len() {
            return Err(DsaError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.nodes[a.0].shape, shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        self.push("reshape", shape, data, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.check_live()?;
        let in_shape = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; in_shape.len()];
        let valid = axes.len() == in_shape.len()
            && axes.iter().all(|&ax| {
                if ax >= in_shape.len() || seen[ax] {
                    false
                } else {
                    seen[ax] = true;
                    true
                }
            });
        if !valid {
            return Err(DsaError::Shape {
                op: "permute",
                detail: format!("axes {:?} is not a permutation of 0..{}", axes, in_shape.len()),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let mut data = vec![0.0; self.nodes[a.0].data.len()];
        permute_walk(&in_shape, axes, &self.nodes[a.0].data, &mut data, false);
        self.push("permute", out_shape, data, Op::Permute { a, axes: axes.to_vec() })
    }

    /// Stacks `count` copies along a new leading axis.
    pub fn repeat_lead(&mut self, a: NodeId, count: usize) -> Result<NodeId> {
        self.check_live()?;
        if count == 0 {
            return Err(DsaError::Shape { op: "repeat_lead", detail: "count must be ≥ 1".into() });
        }
        let n = self.nodes[a.0].data.len();
        let mut data = Vec::with_capacity(n * count);
        for _ in 0..count {
            data.extend_from_slice(&self.nodes[a.0].data);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(&self.nodes[a.0].shape);
        self.push("repeat_lead", shape, data, Op::RepeatLead { a, count })
    }

    pub fn concat2(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(DsaError::Shape {
                op: "concat2",
                detail: format!("{sa:?} and {sb:?} differ outside axis {axis}"),
            });
        }
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let (wa, wb) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(self.nodes[a.0].data.len() + self.nodes[b.0].data.len());
        for o in 0..outer {
            data.extend_from_slice(&self.nodes[a.0].data[o * wa..(o + 1) * wa]);
            data.extend_from_slice(&self.nodes[b.0].data[o * wb..(o + 1) * wb]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        self.push("concat2", shape, data, Op::Concat2 { a, b, axis })
    }

    /// Indexes one position along `axis` and drops that axis.
    pub fn select(&mut self, a: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        self.check_live()?;
        let sa = &self.nodes[a.0].shape;
        if axis >= sa.len() || index >= sa[axis] {
            return Err(DsaError::Shape {
                op: "select",
                detail: format!("axis {axis} index {index} out of range for {sa:?}"),
            });
        }
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let dim = sa[axis];
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * dim + index) * inner;
            data.extend_from_slice(&self.nodes[a.0].data[base..base + inner]);
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        self.push("select", shape, data, Op::Select { a, axis, index })
    }

    // ---- contractions and reductions ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DsaError::Shape {
                op: "matmul",
                detail: format!("{sa:?} · {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        dgemm_rm(m, k, n, 1.0, &self.nodes[a.0].data, false, &self.nodes[b.0].data, false, 0.0, &mut data);
        self.push("matmul", vec![m, n], data, Op::Matmul { a, b })
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, false)
    }

    /// Batched a · bᵀ (per slice).
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let name: &'static str = if transpose_b { "bmm_nt" } else { "bmm" };
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(DsaError::Shape {
                op: name,
                detail: format!("{sa:?} × {sb:?} (transpose_b={transpose_b})"),
            });
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut data = vec![0.0; g * m * n];
        for i in 0..g {
            dgemm_rm(
                m,
                k,
                n,
                1.0,
                &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                false,
                &self.nodes[b.0].data[i * k * n..(i + 1) * k * n],
                transpose_b,
                0.0,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(name, vec![g, m, n], data, Op::Bmm { a, b, transpose_b })
    }

    /// Softmax along the last axis; rows are shift-normalized for stability.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() || *sa.last().unwrap() == 0 {
            return Err(DsaError::Shape {
                op: "softmax",
                detail: format!("needs a non-empty last axis, got {sa:?}"),
            });
        }
        let d = *sa.last().unwrap();
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push("softmax", sa.clone(), data, Op::Softmax { a })
    }

    /// Layer norm over the last axis with learnable scale/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let sx = &self.nodes[x.0].shape;
        let d = *sx.last().ok_or_else(|| DsaError::Shape {
            op: "layer_norm",
            detail: "input must have rank ≥ 1".into(),
        })?;
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(DsaError::Shape {
                op: "layer_norm",
                detail: format!(
                    "scale {:?} / shift {:?} must both be [{d}] for input {sx:?}",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            });
        }
        let rows = self.nodes[x.0].data.len() / d;
        let mut data = vec![0.0; self.nodes[x.0].data.len()];
        let mut stats = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let xr = &self.nodes[x.0].data[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            stats.push(mean);
            stats.push(rstd);
            for j in 0..d {
                let xhat = (xr[j] - mean) * rstd;
                data[r * d + j] = xhat * self.nodes[gamma.0].data[j] + self.nodes[beta.0].data[j];
            }
        }
        self.push("layer_norm", sx.clone(), data, Op::LayerNorm { x, gamma, beta, stats })
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let n = self.nodes[a.0].data.len().max(1);
        let v = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        self.push("mean_all", vec![1], vec![v], Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.nodes[a.0].data.iter().sum::<f64>();
        self.push("sum_all", vec![1], vec![v], Op::SumAll { a })
    }

    /// Sums away the trailing `reduced` axes.
    pub fn sum_last(&mut self, a: NodeId, reduced: usize) -> Result<NodeId> {
        self.check_live()?;
        let sa = &self.nodes[a.0].shape;
        if reduced == 0 || reduced >= sa.len() {
            return Err(DsaError::Shape {
                op: "sum_last",
                detail: format!("cannot reduce {reduced} trailing axes of {sa:?}"),
            });
        }
        let group: usize = sa[sa.len() - reduced..].iter().product();
        let lead = self.nodes[a.0].data.len() / group;
        let mut data = vec![0.0; lead];
        for (i, chunk) in self.nodes[a.0].data.chunks(group).enumerate() {
            data[i] = chunk.iter().sum();
        }
        let shape = sa[..sa.len() - reduced].to_vec();
        self.push("sum_last", shape, data, Op::SumLast { a, reduced })
    }

    /// Per-example cross-entropy of logits rows vs integer targets, fused
    /// with log-softmax (log-sum-exp with max subtraction). Output (B,).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check_live()?;
        let sl = &self.nodes[logits.0].shape;
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(DsaError::Shape {
                op: "cross_entropy",
                detail: format!("logits {sl:?} vs {} targets", targets.len()),
            });
        }
        let (bsz, k) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(DsaError::Shape {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut data = vec![0.0; bsz];
        let mut probs = vec![0.0; bsz * k];
        for b in 0..bsz {
            let row = &self.nodes[logits.0].data[b * k..(b + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[b * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[b * k + j] /= z;
            }
            data[b] = m + z.ln() - row[targets[b]];
        }
        self.push(
            "cross_entropy",
            vec![bsz],
            data,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    // ---- differentiation ----

    /// Reverse sweep from a scalar root. Consumes the tape: a second
    /// backward (or further op recording) errors until a new forward pass.
    /// Every requires-grad leaf gets a gradient, zero if unreachable.
    pub fn backward(&mut self, root: NodeId) -> Result<Grads> {
        self.check_live()?;
        let adj = self.sweep(root)?;
        self.consumed = true;
        let mut grads = Grads { adj };
        self.fill_leaf_zeros(&mut grads);
        self.check_leaf_grads(&grads)?;
        Ok(grads)
    }

    /// Like [`Tape::backward`] for several roots at once: one independent
    /// sweep per root over the same frozen forward values. The attack loop
    /// needs separate gradients of its loss terms; rebuilding the forward
    /// pass per root would triple the work.
    pub fn grad_multi(&mut self, roots: &[NodeId]) -> Result<Vec<Grads>> {
        self.check_live()?;
        let mut out = Vec::with_capacity(roots.len());
        for &r in roots {
            let adj = self.sweep(r)?;
            let mut g = Grads { adj };
            self.fill_leaf_zeros(&mut g);
            self.check_leaf_grads(&g)?;
            out.push(g);
        }
        self.consumed = true;
        Ok(out)
    }

    fn fill_leaf_zeros(&self, grads: &mut Grads) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: true } = node.op {
                if i < grads.adj.len() && grads.adj[i].is_none() {
                    grads.adj[i] = Some(vec![0.0; node.data.len()]);
                }
                if i >= grads.adj.len() {
                    grads.adj.resize(i + 1, None);
                    grads.adj[i] = Some(vec![0.0; node.data.len()]);
                }
            }
        }
    }

    fn check_leaf_grads(&self, grads: &Grads) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: true } = node.op {
                if let Some(g) = grads.adj.get(i).and_then(|g| g.as_deref()) {
                    ensure_finite(&format!("gradient of leaf node {i}"), g)?;
                }
            }
        }
        Ok(())
    }

    fn sweep(&self, root: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        let rn = &self.nodes[root.0];
        if rn.data.len() != 1 {
            return Err(DsaError::Shape {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", rn.shape),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if adj[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                continue;
            }
            let dy = adj[id].take().expect("checked above");
            self.push_adjoints(id, &dy, &mut adj);
        }
        Ok(adj)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push_adjoints(&self, id: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        fn buf<'a>(adj: &'a mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &'a mut [f64] {
            adj[id.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                for (p, other) in [(a, b), (b, a)] {
                    let _ = other;
                    if self.needs(*p) {
                        let g = buf(adj, *p, dy.len());
                        for (gi, di) in g.iter_mut().zip(dy) {
                            *gi += di;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                }
                if self.needs(*b) {
                    let g = buf(adj, *b, dy.len());
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi -= di;
                    }
                }
            }
            Op::AddBcast { a, b } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                }
                if self.needs(*b) {
                    let bn = self.nodes[b.0].data.len();
                    let g = buf(adj, *b, bn);
                    for (i, di) in dy.iter().enumerate() {
                        g[i % bn] += di;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] * self.nodes[b.0].data[i];
                    }
                }
                if self.needs(*b) {
                    let g = buf(adj, *b, dy.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] * self.nodes[a.0].data[i];
                    }
                }
            }
            Op::MulBcastLast { a, s } => {
                let d = *self.nodes[a.0].shape.last().unwrap();
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] * self.nodes[s.0].data[i / d];
                    }
                }
                if self.needs(*s) {
                    let sn = self.nodes[s.0].data.len();
                    let g = buf(adj, *s, sn);
                    for i in 0..dy.len() {
                        g[i / d] += dy[i] * self.nodes[a.0].data[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di * c;
                    }
                }
            }
            Op::Affine { a, k, .. } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di * k;
                    }
                }
            }
            Op::ClampMax { a, cap } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        if self.nodes[a.0].data[i] < *cap {
                            g[i] += dy[i];
                        }
                    }
                }
            }
            Op::Sqrt { a } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        let y = node.data[i];
                        if y > 0.0 {
                            g[i] += dy[i] * 0.5 / y;
                        }
                    }
                }
            }
            Op::Ln { a } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] / self.nodes[a.0].data[i];
                    }
                }
            }
            Op::Recip { a } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        let y = node.data[i];
                        g[i] -= dy[i] * y * y;
                    }
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for i in 0..dy.len() {
                        g[i] += dy[i] * tanh_gelu_grad(self.nodes[a.0].data[i]);
                    }
                }
            }
            Op::GradReverse { a, lambda } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi -= lambda * di;
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    let g = buf(adj, *a, dy.len());
                    for (gi, di) in g.iter_mut().zip(dy) {
                        *gi += di;
                    }
                }
            }
            Op::Permute { a, axes } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].data.len();
                    let g = buf(adj, *a, n);
                    permute_walk(&self.nodes[a.0].shape, axes, dy, g, true);
                }
            }
            Op::RepeatLead { a, count } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].data.len();
                    let g = buf(adj, *a, n);
                    for c in 0..*count {
                        for j in 0..n {
                            g[j] += dy[c * n + j];
                        }
                    }
                }
            }
            Op::Concat2 { a, b, axis } => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let inner: usize = sa[axis + 1..].iter().product();
                let outer: usize = sa[..*axis].iter().product();
                let (wa, wb) = (sa[*axis] * inner, sb[*axis] * inner);
                if self.needs(*a) {
                    let g = buf(adj, *a, self.nodes[a.0].data.len());
                    for o in 0..outer {
                        for j in 0..wa {
                            g[o * wa + j] += dy[o * (wa + wb) + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let g = buf(adj, *b, self.nodes[b.0].data.len());
                    for o in 0..outer {
                        for j in 0..wb {
                            g[o * wb + j] += dy[o * (wa + wb) + wa + j];
                        }
                    }
                }
            }
            Op::Select { a, axis, index } => {
                if self.needs(*a) {
                    let sa = &self.nodes[a.0].shape;
                    let inner: usize = sa[axis + 1..].iter().product();
                    let outer: usize = sa[..*axis].iter().product();
                    let dim = sa[*axis];
                    let g = buf(adj, *a, self.nodes[a.0].data.len());
                    for o in 0..outer {
                        let base = (o * dim + index) * inner;
                        for j in 0..inner {
                            g[base + j] += dy[o * inner + j];
                        }
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    let g = buf(adj, *a, m * k);
                    dgemm_rm(m, n, k, 1.0, dy, false, &self.nodes[b.0].data, true, 1.0, g);
                }
                if self.needs(*b) {
                    let g = buf(adj, *b, k * n);
                    dgemm_rm(k, m, n, 1.0, &self.nodes[a.0].data, true, dy, false, 1.0, g);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let sa = &self.nodes[a.0].shape;
                let (g_, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                for i in 0..g_ {
                    let dyi = &dy[i * m * n..(i + 1) * m * n];
                    let ai = &self.nodes[a.0].data[i * m * k..(i + 1) * m * k];
                    if !transpose_b {
                        // C = A·B : dA += dy·Bᵀ ; dB += Aᵀ·dy
                        if self.needs(*a) {
                            let ga = buf(adj, *a, g_ * m * k);
                            dgemm_rm(
                                m,
                                n,
                                k,
                                1.0,
                                dyi,
                                false,
                                &self.nodes[b.0].data[i * k * n..(i + 1) * k * n],
                                true,
                                1.0,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                        if self.needs(*b) {
                            let gb = buf(adj, *b, g_ * k * n);
                            dgemm_rm(k, m, n, 1.0, ai, true, dyi, false, 1.0, &mut gb[i * k * n..(i + 1) * k * n]);
                        }
                    } else {
                        // C = A·Bᵀ with b stored (n,k): dA += dy·B ; dB += dyᵀ·A
                        if self.needs(*a) {
                            let ga = buf(adj, *a, g_ * m * k);
                            dgemm_rm(
                                m,
                                n,
                                k,
                                1.0,
                                dyi,
                                false,
                                &self.nodes[b.0].data[i * n * k..(i + 1) * n * k],
                                false,
                                1.0,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                        if self.needs(*b) {
                            let gb = buf(adj, *b, g_ * n * k);
                            dgemm_rm(n, m, k, 1.0, dyi, true, ai, false, 1.0, &mut gb[i * n * k..(i + 1) * n * k]);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if self.needs(*a) {
                    let d = *node.shape.last().unwrap();
                    let g = buf(adj, *a, dy.len());
                    for r in 0..dy.len() / d {
                        let y = &node.data[r * d..(r + 1) * d];
                        let dyr = &dy[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(dyr).map(|(yi, di)| yi * di).sum();
                        for j in 0..d {
                            g[r * d + j] += y[j] * (dyr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let d = *node.shape.last().unwrap();
                let rows = dy.len() / d;
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                if self.needs(*beta) {
                    let g = buf(adj, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += dy[r * d + j];
                        }
                    }
                }
                if self.needs(*gamma) {
                    let g = buf(adj, *gamma, d);
                    for r in 0..rows {
                        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean) * rstd;
                            g[j] += dy[r * d + j] * xhat;
                        }
                    }
                }
                if self.needs(*x) {
                    let g = buf(adj, *x, dy.len());
                    for r in 0..rows {
                        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean) * rstd;
                            let dxhat = dy[r * d + j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean) * rstd;
                            let dxhat = dy[r * d + j] * gd[j];
                            g[r * d + j] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].data.len();
                    let g = buf(adj, *a, n);
                    let c = dy[0] / n as f64;
                    for gi in g.iter_mut() {
                        *gi += c;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].data.len();
                    let g = buf(adj, *a, n);
                    for gi in g.iter_mut() {
                        *gi += dy[0];
                    }
                }
            }
            Op::SumLast { a, reduced } => {
                if self.needs(*a) {
                    let sa = &self.nodes[a.0].shape;
                    let group: usize = sa[sa.len() - reduced..].iter().product();
                    let g = buf(adj, *a, self.nodes[a.0].data.len());
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += dy[i / group];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let k = self.nodes[logits.0].shape[1];
                    let g = buf(adj, *logits, self.nodes[logits.0].data.len());
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            g[b * k + j] += dy[b] * (probs[b * k + j] - ind);
                        }
                    }
                }
            }
        }
    }
}


/// Analytic-vs-finite-difference checks, one per primitive. Each test
/// reduces the op under a fixed random weighting so every output element
/// influences the scalar, then compares `backward` against the central
/// difference at h=1e-5.
#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tensor::{fd_gradient, max_rel_err};

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn randn(rng: &mut CounterRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    /// Scalarize: sum(y ∘ w) for fixed weights w.
    fn reduce(tape: &mut Tape, y: NodeId, w: &[f64]) -> Result<NodeId> {
        let shape = tape.shape(y).to_vec();
        let wn = tape.constant(t(&shape, w));
        let m = tape.mul(y, wn)?;
        tape.sum_all(m)
    }

    /// FD-checks ∂(weighted sum of op(x))/∂x for a unary op.
    fn check_unary(
        shape: &[usize],
        seed: u64,
        gen: impl Fn(&mut CounterRng) -> f64,
        build: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
    ) {
        let n = shape.iter().product::<usize>();
        let mut rng = CounterRng::new(seed, 0);
        let x0: Vec<f64> = (0..n).map(|_| gen(&mut rng)).collect();
        let mut wr = CounterRng::new(seed, 1);

        let run = |xs: &[f64], wr: &mut CounterRng| -> Result<(f64, Option<Vec<f64>>, Vec<f64>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(t(shape, xs), true);
            let y = build(&mut tape, x)?;
            let yn = tape.data(y).len();
            let w = randn(wr, yn);
            let loss = reduce(&mut tape, y, &w)?;
            let v = tape.scalar_value(loss)?;
            let g = tape.backward(loss)?.take(x);
            Ok((v, g, w))
        };

        let (_, analytic, w) = run(&x0, &mut wr).unwrap();
        let analytic = analytic.unwrap();
        let numeric = fd_gradient(
            |xs| {
                let mut tape = Tape::new();
                let x = tape.leaf(t(shape, xs), true);
                let y = build(&mut tape, x)?;
                let loss = reduce(&mut tape, y, &w)?;
                tape.scalar_value(loss)
            },
            &x0,
            H,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < TOL, "max rel err {err:.3e} for shape {shape:?}");
    }

    /// FD-checks a two-input op with respect to each input in turn.
    fn check_binary(
        sa: &[usize],
        sb: &[usize],
        seed: u64,
        build: impl Fn(&mut Tape, NodeId, NodeId) -> Result<NodeId>,
    ) {
        let (na, nb) = (sa.iter().product::<usize>(), sb.iter().product::<usize>());
        let mut rng = CounterRng::new(seed, 0);
        let a0 = randn(&mut rng, na);
        let b0 = randn(&mut rng, nb);

        for wrt_b in [false, true] {
            let mut wtape = Tape::new();
            let an = wtape.leaf(t(sa, &a0), true);
            let bn = wtape.leaf(t(sb, &b0), true);
            let y = build(&mut wtape, an, bn).unwrap();
            let mut wr = CounterRng::new(seed, 2);
            let w = randn(&mut wr, wtape.data(y).len());
            let loss = reduce(&mut wtape, y, &w).unwrap();
            let grads = wtape.backward(loss).unwrap();
            let analytic = grads.get(if wrt_b { bn } else { an }).unwrap().to_vec();

            let x0 = if wrt_b { &b0 } else { &a0 };
            let numeric = fd_gradient(
                |xs| {
                    let mut tape = Tape::new();
                    let (av, bv): (&[f64], &[f64]) = if wrt_b { (&a0, xs) } else { (xs, &b0) };
                    let an = tape.leaf(t(sa, av), true);
                    let bn = tape.leaf(t(sb, bv), true);
                    let y = build(&mut tape, an, bn)?;
                    let loss = reduce(&mut tape, y, &w)?;
                    tape.scalar_value(loss)
                },
                x0,
                H,
            )
            .unwrap();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < TOL, "max rel err {err:.3e} wrt_b={wrt_b} for {sa:?}×{sb:?}");
        }
    }

    #[test]
    fn fd_matmul() {
        check_binary(&[3, 4], &[4, 5], 100, |t, a, b| t.matmul(a, b));
    }

    #[test]
    fn fd_bmm() {
        check_binary(&[2, 3, 4], &[2, 4, 5], 101, |t, a, b| t.bmm(a, b));
    }

    #[test]
    fn fd_bmm_nt() {
        check_binary(&[2, 3, 4], &[2, 5, 4], 102, |t, a, b| t.bmm_nt(a, b));
    }

    #[test]
    fn fd_add_sub_mul() {
        check_binary(&[3, 4], &[3, 4], 103, |t, a, b| t.add(a, b));
        check_binary(&[3, 4], &[3, 4], 104, |t, a, b| t.sub(a, b));
        check_binary(&[3, 4], &[3, 4], 105, |t, a, b| t.mul(a, b));
    }

    #[test]
    fn fd_add_bcast() {
        check_binary(&[2, 3, 4], &[3, 4], 106, |t, a, b| t.add_bcast(a, b));
        check_binary(&[5, 4], &[4], 107, |t, a, b| t.add_bcast(a, b));
    }

    #[test]
    fn fd_mul_bcast_last() {
        check_binary(&[2, 3, 4], &[2, 3], 108, |t, a, b| t.mul_bcast_last(a, b));
    }

    #[test]
    fn fd_concat2() {
        check_binary(&[2, 2, 3], &[2, 4, 3], 109, |t, a, b| t.concat2(a, b, 1));
    }

    #[test]
    fn fd_scale_affine() {
        check_unary(&[3, 5], 110, |r| r.normal(), |t, x| t.scale(x, -1.7));
        check_unary(&[3, 5], 111, |r| r.normal(), |t, x| t.affine(x, 0.6, 2.0));
    }

    #[test]
    fn fd_reshape_permute() {
        check_unary(&[2, 3, 4], 112, |r| r.normal(), |t, x| {
            let r = t.reshape(x, vec![6, 4])?;
            t.permute(r, &[1, 0])
        });
        check_unary(&[2, 3, 4, 5], 113, |r| r.normal(), |t, x| t.permute(x, &[3, 1, 0, 2]));
    }

    #[test]
    fn fd_repeat_select() {
        check_unary(&[3, 4], 114, |r| r.normal(), |t, x| t.repeat_lead(x, 5));
        check_unary(&[2, 5, 3], 115, |r| r.normal(), |t, x| t.select(x, 1, 2));
    }

    #[test]
    fn fd_softmax() {
        check_unary(&[4, 6], 116, |r| 2.0 * r.normal(), |t, x| t.softmax(x));
    }

    #[test]
    fn fd_gelu() {
        check_unary(&[5, 5], 117, |r| 2.0 * r.normal(), |t, x| t.gelu(x));
    }

    #[test]
    fn fd_layer_norm_all_inputs() {
        let d = 6;
        check_unary(&[4, d], 118, |r| r.normal() * 1.5 + 0.3, |t, x| {
            let g = t.constant(Tensor::new(vec![d], vec![1.1, 0.9, 1.3, 0.7, 1.0, 1.2]).unwrap());
            let b = t.constant(Tensor::new(vec![d], vec![0.1, -0.2, 0.0, 0.4, -0.1, 0.2]).unwrap());
            t.layer_norm(x, g, b)
        });
        // gradient w.r.t. scale and shift
        check_binary(&[4, d], &[d], 119, |t, x, g| {
            let b = t.constant(Tensor::zeros(vec![d]));
            t.layer_norm(x, g, b)
        });
        check_binary(&[4, d], &[d], 120, |t, x, b| {
            let g = t.constant(Tensor::full(vec![d], 1.0));
            t.layer_norm(x, g, b)
        });
    }

    #[test]
    fn fd_reductions() {
        check_unary(&[3, 4], 121, |r| r.normal(), |t, x| t.mean_all(x));
        check_unary(&[3, 4], 122, |r| r.normal(), |t, x| t.sum_all(x));
        check_unary(&[2, 3, 4], 123, |r| r.normal(), |t, x| t.sum_last(x, 2));
        check_unary(&[2, 3, 4], 124, |r| r.normal(), |t, x| t.sum_last(x, 1));
    }

    #[test]
    fn fd_cross_entropy() {
        check_unary(&[4, 3], 125, |r| 1.5 * r.normal(), |t, x| t.cross_entropy(x, &[0, 2, 1, 2]));
    }

    #[test]
    fn fd_clamp_sqrt_ln_recip() {
        // inputs kept clear of the clamp kink and of zero
        check_unary(&[4, 4], 126, |r| {
            let mut v = r.normal();
            while (v - 0.5).abs() < 1e-3 {
                v = r.normal();
            }
            v
        }, |t, x| t.clamp_max(x, 0.5));
        check_unary(&[4, 4], 127, |r| 0.1 + 2.0 * r.uniform(), |t, x| t.sqrt(x));
        check_unary(&[4, 4], 128, |r| 0.2 + 2.0 * r.uniform(), |t, x| t.ln(x));
        check_unary(&[4, 4], 129, |r| 0.2 + 2.0 * r.uniform(), |t, x| t.recip(x));
    }

    #[test]
    fn fd_grad_reverse_scales_by_negative_lambda() {
        // composite: gelu(grad_reverse(x)) so the reversal sits mid-graph
        let shape = [3, 3];
        let mut rng = CounterRng::new(130, 0);
        let x0 = randn(&mut rng, 9);
        let lambda = 0.7;

        let mut tape = Tape::new();
        let x = tape.leaf(t(&shape, &x0), true);
        let r = tape.grad_reverse(x, lambda).unwrap();
        let y = tape.gelu(r).unwrap();
        let mut wr = CounterRng::new(130, 1);
        let w = randn(&mut wr, 9);
        let loss = reduce(&mut tape, y, &w).unwrap();
        let analytic = tape.backward(loss).unwrap().take(x).unwrap();

        // numeric gradient of the same graph WITHOUT the reversal
        let numeric = fd_gradient(
            |xs| {
                let mut tape = Tape::new();
                let x = tape.leaf(t(&shape, xs), true);
                let y = tape.gelu(x)?;
                let loss = reduce(&mut tape, y, &w)?;
                tape.scalar_value(loss)
            },
            &x0,
            H,
        )
        .unwrap();
        let flipped: Vec<f64> = numeric.iter().map(|g| -lambda * g).collect();
        let err = max_rel_err(&analytic, &flipped);
        assert!(err < TOL, "max rel err {err:.3e}");
    }

    #[test]
    fn fd_deep_composition() {
        // matmul → add_bcast → gelu → layer_norm → softmax → cross_entropy
        let (m, k, n) = (3, 4, 3);
        let mut rng = CounterRng::new(131, 0);
        let w0 = randn(&mut rng, k * n);
        let b0 = randn(&mut rng, n);
        let targets = [2usize, 0, 1];

        let build = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
            let w = tape.leaf(t(&[k, n], &w0), true);
            let b = tape.leaf(t(&[n], &b0), true);
            let h = tape.matmul(x, w)?;
            let h = tape.add_bcast(h, b)?;
            let h = tape.gelu(h)?;
            let g = tape.constant(Tensor::full(vec![n], 1.0));
            let z = tape.constant(Tensor::zeros(vec![n]));
            let h = tape.layer_norm(h, g, z)?;
            let ce = tape.cross_entropy(h, &targets)?;
            tape.mean_all(ce)
        };

        let x0 = randn(&mut rng, m * k);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[m, k], &x0), true);
        let loss = build(&mut tape, x).unwrap();
        let analytic = tape.backward(loss).unwrap().take(x).unwrap();

        let numeric = fd_gradient(
            |xs| {
                let mut tape = Tape::new();
                let x = tape.leaf(t(&[m, k], xs), true);
                let loss = build(&mut tape, x)?;
                tape.scalar_value(loss)
            },
            &x0,
            H,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < TOL, "max rel err {err:.3e}");
    }
}
