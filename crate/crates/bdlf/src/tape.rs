//! Reverse-mode autodiff on a Wengert tape.
//!
//! Values are `ArrayD<f64>` computed eagerly as ops are recorded; `backward`
//! walks the tape in reverse and accumulates adjoints. `replay` re-runs the
//! forward pass with selected leaves overridden while holding every `Detach`
//! node at its originally recorded value, so central finite differences taken
//! through `replay` measure exactly the stop-gradient objective the backward
//! pass differentiates.

use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use crate::params::{ParamId, Params};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

const SQRT_GUARD: f64 = 1e-24;
const LN_GUARD: f64 = 1e-300;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp(NodeId, f64, f64),
    SignedCbrt(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    AddColVec(NodeId, NodeId),
    MulColVec(NodeId, NodeId),
    DivColVec(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    ConcatAxis(usize, NodeId, NodeId),
    SliceAxis {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(NodeId, Vec<usize>),
    Permute(NodeId, Vec<usize>),
    Im2col {
        x: NodeId,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Detach(NodeId),
    BatchHardTriplet {
        emb: NodeId,
        labels: Vec<usize>,
        margin: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass. One tape per forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_bindings: Vec<(ParamId, NodeId)>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to the given node, if any flowed into it.
    pub fn wrt(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

fn a2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("op requires a 2-D value")
}

fn softmax_rows_val(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x = a2(x);
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out.into_dyn()
}

fn log_softmax_rows_val(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x = a2(x);
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out.into_dyn()
}

fn pairwise_dist(e: &ArrayView2<'_, f64>) -> ndarray::Array2<f64> {
    let n = e.nrows();
    let mut d = ndarray::Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..e.ncols() {
                let t = e[[i, k]] - e[[j, k]];
                s += t * t;
            }
            let v = s.sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Hardest-positive / hardest-negative index per anchor. Ties resolve to the
/// lowest index so the selection is stable.
fn batch_hard_select(d: &ndarray::Array2<f64>, labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut sel = Vec::with_capacity(n);
    for i in 0..n {
        let mut hp = usize::MAX;
        let mut hn = usize::MAX;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if hp == usize::MAX || d[[i, j]] > d[[i, hp]] {
                    hp = j;
                }
            } else if hn == usize::MAX || d[[i, j]] < d[[i, hn]] {
                hn = j;
            }
        }
        sel.push((hp, hn));
    }
    sel
}

fn batch_hard_value(e: &ArrayD<f64>, labels: &[usize], margin: f64) -> ArrayD<f64> {
    let e = a2(e);
    let d = pairwise_dist(&e);
    let sel = batch_hard_select(&d, labels);
    let mut total = 0.0;
    for (i, &(hp, hn)) in sel.iter().enumerate() {
        total += (d[[i, hp]] - d[[i, hn]] + margin).max(0.0);
    }
    ArrayD::from_elem(IxDyn(&[1]), total / labels.len() as f64)
}

fn im2col_shape(x: &ArrayD<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    (
        (h + 2 * pad - kh) / stride + 1,
        (w + 2 * pad - kw) / stride + 1,
    )
}

fn im2col_val(x: &ArrayD<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> ArrayD<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = im2col_shape(x, kh, kw, stride, pad);
    let mut out = ndarray::Array2::<f64>::zeros((n * oh * ow, c * kh * kw));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                out[[r, (ci * kh + ky) * kw + kx]] =
                                    x[[ni, ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Shared forward evaluation used both when recording and when replaying.
/// `Leaf` and `Detach` never reach here; callers handle them.
fn eval_op(op: &Op, get: &dyn Fn(NodeId) -> ArrayD<f64>) -> ArrayD<f64> {
    match op {
        Op::Leaf | Op::Detach(_) => unreachable!("handled by caller"),
        Op::Add(a, b) => &get(*a) + &get(*b),
        Op::Sub(a, b) => &get(*a) - &get(*b),
        Op::Mul(a, b) => &get(*a) * &get(*b),
        Op::Div(a, b) => &get(*a) / &get(*b),
        Op::Scale(a, c) => get(*a).mapv(|v| v * c),
        Op::AddScalar(a, c) => get(*a).mapv(|v| v + c),
        Op::Exp(a) => get(*a).mapv(f64::exp),
        Op::Ln(a) => get(*a).mapv(|v| v.max(LN_GUARD).ln()),
        Op::Sqrt(a) => get(*a).mapv(|v| (v.max(0.0) + SQRT_GUARD).sqrt()),
        Op::Tanh(a) => get(*a).mapv(f64::tanh),
        Op::LeakyRelu(a, alpha) => get(*a).mapv(|v| if v > 0.0 { v } else { alpha * v }),
        Op::Clamp(a, lo, hi) => get(*a).mapv(|v| v.clamp(*lo, *hi)),
        Op::SignedCbrt(a) => get(*a).mapv(f64::cbrt),
        Op::MatMul(a, b) => {
            let (va, vb) = (get(*a), get(*b));
            a2(&va).dot(&a2(&vb)).into_dyn()
        }
        Op::Transpose(a) => {
            let v = get(*a);
            a2(&v).t().as_standard_layout().to_owned().into_dyn()
        }
        Op::SumAll(a) => ArrayD::from_elem(IxDyn(&[1]), get(*a).sum()),
        Op::MeanAll(a) => {
            let v = get(*a);
            ArrayD::from_elem(IxDyn(&[1]), v.sum() / v.len() as f64)
        }
        Op::SumCols(a) => {
            let v = get(*a);
            a2(&v).sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn()
        }
        Op::AddColVec(a, b) | Op::AddRowVec(a, b) => &get(*a) + &get(*b),
        Op::MulColVec(a, b) | Op::MulRowVec(a, b) => &get(*a) * &get(*b),
        Op::DivColVec(a, b) => &get(*a) / &get(*b),
        Op::SoftmaxRows(a) => softmax_rows_val(&get(*a)),
        Op::LogSoftmaxRows(a) => log_softmax_rows_val(&get(*a)),
        Op::ConcatAxis(axis, a, b) => {
            let (va, vb) = (get(*a), get(*b));
            concatenate(Axis(*axis), &[va.view(), vb.view()]).expect("concat shape mismatch")
        }
        Op::SliceAxis { x, axis, start, end } => get(*x)
            .slice_axis(Axis(*axis), ndarray::Slice::from(*start..*end))
            .to_owned(),
        Op::Reshape(a, shape) => get(*a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape"),
        Op::Permute(a, perm) => {
            let v = get(*a);
            v.view()
                .permuted_axes(IxDyn(perm))
                .as_standard_layout()
                .to_owned()
        }
        Op::Im2col { x, kh, kw, stride, pad } => im2col_val(&get(*x), *kh, *kw, *stride, *pad),
        Op::BatchHardTriplet { emb, labels, margin } => {
            batch_hard_value(&get(*emb), labels, *margin)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `[1]`-shaped node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.first().unwrap()
    }

    pub fn param_bindings(&self) -> &[(ParamId, NodeId)] {
        &self.param_bindings
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op) -> NodeId {
        let needs = self.op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        let value = {
            let get = |id: NodeId| self.nodes[id.0].value.clone();
            eval_op(&op, &get)
        };
        self.push(value, op, needs)
    }

    fn op_parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddColVec(a, b)
            | Op::MulColVec(a, b)
            | Op::DivColVec(a, b)
            | Op::AddRowVec(a, b)
            | Op::MulRowVec(a, b)
            | Op::ConcatAxis(_, a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Clamp(a, _, _)
            | Op::SignedCbrt(a)
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumCols(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Reshape(a, _)
            | Op::Permute(a, _)
            | Op::Detach(a) => vec![*a],
            Op::SliceAxis { x, .. } => vec![*x],
            Op::Im2col { x, .. } => vec![*x],
            Op::BatchHardTriplet { emb, .. } => vec![*emb],
        }
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Non-differentiable input (data, targets, fixed matrices).
    pub fn constant(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(v, Op::Leaf, false)
    }

    /// Differentiable input that is not a model parameter.
    pub fn leaf(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(v, Op::Leaf, true)
    }

    /// Differentiable leaf bound to a parameter slot for optimizer pickup.
    pub fn param_leaf(&mut self, v: ArrayD<f64>, p: ParamId) -> NodeId {
        let id = self.push(v, Op::Leaf, true);
        self.param_bindings.push((p, id));
        id
    }

    // ── Ops ─────────────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        self.push_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        self.push_op(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        self.push_op(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "div shape");
        self.push_op(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push_op(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push_op(Op::AddScalar(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.push_op(Op::LeakyRelu(a, alpha))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push_op(Op::Clamp(a, lo, hi))
    }

    pub fn signed_cbrt(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::SignedCbrt(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape()[1],
            self.value(b).shape()[0],
            "matmul inner dims"
        );
        self.push_op(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::MeanAll(a))
    }

    /// Row sums of a 2-D value, shaped `[n, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::SumCols(a))
    }

    pub fn add_colvec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_colvec(a, b);
        self.push_op(Op::AddColVec(a, b))
    }

    pub fn mul_colvec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_colvec(a, b);
        self.push_op(Op::MulColVec(a, b))
    }

    pub fn div_colvec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_colvec(a, b);
        self.push_op(Op::DivColVec(a, b))
    }

    pub fn add_rowvec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_rowvec(a, b);
        self.push_op(Op::AddRowVec(a, b))
    }

    pub fn mul_rowvec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_rowvec(a, b);
        self.push_op(Op::MulRowVec(a, b))
    }

    fn check_colvec(&self, a: NodeId, b: NodeId) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(sa.len() == 2 && sb == [sa[0], 1], "colvec broadcast shape");
    }

    fn check_rowvec(&self, a: NodeId, b: NodeId) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(sa.len() == 2 && sb == [1, sa[1]], "rowvec broadcast shape");
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push_op(Op::LogSoftmaxRows(a))
    }

    pub fn concat(&mut self, axis: usize, a: NodeId, b: NodeId) -> NodeId {
        self.push_op(Op::ConcatAxis(axis, a, b))
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        assert!(end <= self.value(x).shape()[axis] && start < end, "slice bounds");
        self.push_op(Op::SliceAxis { x, axis, start, end })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let len = self.value(a).len();
        assert_eq!(len, shape.iter().product::<usize>(), "reshape size");
        self.push_op(Op::Reshape(a, shape.to_vec()))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        self.push_op(Op::Permute(a, perm.to_vec()))
    }

    /// Unfold `[n, c, h, w]` into convolution columns `[n*oh*ow, c*kh*kw]`.
    pub fn im2col(&mut self, x: NodeId, kh: usize, kw: usize, stride: usize, pad: usize) -> NodeId {
        assert_eq!(self.value(x).ndim(), 4, "im2col expects NCHW");
        self.push_op(Op::Im2col { x, kh, kw, stride, pad })
    }

    /// Forward identity whose gradient is cut; `replay` holds it at the
    /// recorded value, mirroring stop-gradient semantics.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::Detach(a), false)
    }

    /// Batch-hard triplet loss over row embeddings (fused op; Euclidean).
    pub fn batch_hard_triplet(&mut self, emb: NodeId, labels: &[usize], margin: f64) -> NodeId {
        assert_eq!(self.value(emb).shape()[0], labels.len(), "triplet labels");
        self.push_op(Op::BatchHardTriplet {
            emb,
            labels: labels.to_vec(),
            margin,
        })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulate adjoints of every differentiable node reachable from `root`.
    /// `root` is usually `[1]`-shaped; its seed gradient is all-ones.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.shape()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let op = self.nodes[idx].op.clone();
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, g * val(b));
                self.accumulate(grads, b, g * val(a));
            }
            Op::Div(a, b) => {
                let vb = val(b);
                self.accumulate(grads, a, g / vb);
                self.accumulate(grads, b, -(g * val(a)) / (vb * vb));
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.mapv(|v| v * c)),
            Op::AddScalar(a, _) => self.accumulate(grads, a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, a, g * out),
            Op::Ln(a) => {
                let d = val(a).mapv(|v| 1.0 / v.max(LN_GUARD));
                self.accumulate(grads, a, g * &d);
            }
            Op::Sqrt(a) => {
                let d = out.mapv(|y| 0.5 / y);
                self.accumulate(grads, a, g * &d);
            }
            Op::Tanh(a) => {
                let d = out.mapv(|y| 1.0 - y * y);
                self.accumulate(grads, a, g * &d);
            }
            Op::LeakyRelu(a, alpha) => {
                let d = val(a).mapv(|v| if v > 0.0 { 1.0 } else { alpha });
                self.accumulate(grads, a, g * &d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = val(a).mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                self.accumulate(grads, a, g * &d);
            }
            Op::SignedCbrt(a) => {
                let d = val(a).mapv(|v| {
                    let c = v.cbrt();
                    1.0 / (3.0 * (c * c).max(1e-12))
                });
                self.accumulate(grads, a, g * &d);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let gm = a2(g);
                self.accumulate(grads, a, gm.dot(&a2(vb).t()).into_dyn());
                self.accumulate(grads, b, a2(va).t().dot(&gm).into_dyn());
            }
            Op::Transpose(a) => {
                self.accumulate(grads, a, a2(g).t().as_standard_layout().to_owned().into_dyn())
            }
            Op::SumAll(a) => {
                let s = *g.first().unwrap();
                self.accumulate(grads, a, ArrayD::from_elem(val(a).raw_dim(), s));
            }
            Op::MeanAll(a) => {
                let va = val(a);
                let s = *g.first().unwrap() / va.len() as f64;
                self.accumulate(grads, a, ArrayD::from_elem(va.raw_dim(), s));
            }
            Op::SumCols(a) => {
                let va = val(a);
                let mut d = ArrayD::zeros(va.raw_dim());
                let gm = a2(g);
                let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                for i in 0..d2.nrows() {
                    d2.row_mut(i).fill(gm[[i, 0]]);
                }
                self.accumulate(grads, a, d);
            }
            Op::AddColVec(a, b) => {
                self.accumulate(grads, a, g.clone());
                let gb = a2(g).sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
                self.accumulate(grads, b, gb);
            }
            Op::MulColVec(a, b) => {
                self.accumulate(grads, a, g * val(b));
                let gb = a2(&(g * val(a)))
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .into_dyn();
                self.accumulate(grads, b, gb);
            }
            Op::DivColVec(a, b) => {
                let vb = val(b);
                self.accumulate(grads, a, g / vb);
                let inner = -(g * val(a)) / (vb * vb);
                let gb = a2(&inner).sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
                self.accumulate(grads, b, gb);
            }
            Op::AddRowVec(a, b) => {
                self.accumulate(grads, a, g.clone());
                let gb = a2(g).sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                self.accumulate(grads, b, gb);
            }
            Op::MulRowVec(a, b) => {
                self.accumulate(grads, a, g * val(b));
                let gb = a2(&(g * val(a)))
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .into_dyn();
                self.accumulate(grads, b, gb);
            }
            Op::SoftmaxRows(a) => {
                let s = a2(out);
                let gm = a2(g);
                let mut d = ndarray::Array2::<f64>::zeros(s.raw_dim());
                for i in 0..s.nrows() {
                    let dot: f64 = s.row(i).iter().zip(gm.row(i)).map(|(x, y)| x * y).sum();
                    for j in 0..s.ncols() {
                        d[[i, j]] = s[[i, j]] * (gm[[i, j]] - dot);
                    }
                }
                self.accumulate(grads, a, d.into_dyn());
            }
            Op::LogSoftmaxRows(a) => {
                let y = a2(out);
                let gm = a2(g);
                let mut d = ndarray::Array2::<f64>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let gsum: f64 = gm.row(i).sum();
                    for j in 0..y.ncols() {
                        d[[i, j]] = gm[[i, j]] - y[[i, j]].exp() * gsum;
                    }
                }
                self.accumulate(grads, a, d.into_dyn());
            }
            Op::ConcatAxis(axis, a, b) => {
                let na = val(a).shape()[axis];
                let total = out.shape()[axis];
                let ga = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(0..na))
                    .to_owned();
                let gb = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(na..total))
                    .to_owned();
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::SliceAxis { x, axis, start, end } => {
                let mut d = ArrayD::zeros(val(x).raw_dim());
                d.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                    .assign(g);
                self.accumulate(grads, x, d);
            }
            Op::Reshape(a, _) => {
                let shape = val(a).shape().to_vec();
                let d = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .unwrap();
                self.accumulate(grads, a, d);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                self.accumulate(grads, a, d);
            }
            Op::Im2col { x, kh, kw, stride, pad } => {
                let vx = val(x);
                let (n, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (oh, ow) = im2col_shape(vx, kh, kw, stride, pad);
                let gm = a2(g);
                let mut d = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let r = (ni * oh + oy) * ow + ox;
                            for ci in 0..c {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0
                                            && ix >= 0
                                            && (iy as usize) < h
                                            && (ix as usize) < w
                                        {
                                            d[[ni, ci, iy as usize, ix as usize]] +=
                                                gm[[r, (ci * kh + ky) * kw + kx]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, d.into_dyn());
            }
            Op::BatchHardTriplet { emb, labels, margin } => {
                let e = val(emb);
                let ev = a2(e);
                let dist = pairwise_dist(&ev);
                let sel = batch_hard_select(&dist, &labels);
                let n = labels.len();
                let gs = *g.first().unwrap() / n as f64;
                let mut d = ndarray::Array2::<f64>::zeros(ev.raw_dim());
                for (i, &(hp, hn)) in sel.iter().enumerate() {
                    if dist[[i, hp]] - dist[[i, hn]] + margin <= 0.0 {
                        continue;
                    }
                    for (j, sign) in [(hp, gs), (hn, -gs)] {
                        let denom = dist[[i, j]].max(1e-12);
                        for k in 0..ev.ncols() {
                            let dd = sign * (ev[[i, k]] - ev[[j, k]]) / denom;
                            d[[i, k]] += dd;
                            d[[j, k]] -= dd;
                        }
                    }
                }
                self.accumulate(grads, emb, d.into_dyn());
            }
        }
    }

    // ── Replay ──────────────────────────────────────────────────────────

    /// Re-run the forward pass with `overrides` replacing leaf values, holding
    /// every `Detach` node at its recorded value. Returns the recomputed value
    /// of `target`. Used by the finite-difference oracle.
    pub fn replay(&self, overrides: &[(NodeId, ArrayD<f64>)], target: NodeId) -> ArrayD<f64> {
        let mut vals: Vec<Option<ArrayD<f64>>> = vec![None; target.0 + 1];
        for idx in 0..=target.0 {
            let node = &self.nodes[idx];
            let v = match &node.op {
                Op::Leaf => overrides
                    .iter()
                    .find(|(id, _)| id.0 == idx)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_else(|| node.value.clone()),
                // Frozen: stop-gradient targets do not move under perturbation.
                Op::Detach(_) => node.value.clone(),
                op => {
                    let get = |id: NodeId| vals[id.0].clone().expect("replay order");
                    eval_op(op, &get)
                }
            };
            vals[idx] = Some(v);
        }
        vals[target.0].take().unwrap()
    }

    /// Scalar convenience wrapper over [`Tape::replay`].
    pub fn replay_scalar(&self, overrides: &[(NodeId, ArrayD<f64>)], target: NodeId) -> f64 {
        *self.replay(overrides, target).first().unwrap()
    }
}

/// A tape plus a read-only binding to the parameter store. Binds each
/// parameter at most once per forward pass so gradients accumulate on a
/// single leaf even when a parameter is used in several places.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p Params,
    bound: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Node for a parameter, inserting the leaf on first use.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.index()] {
            return n;
        }
        let n = self.tape.param_leaf(self.params.value(id).clone(), id);
        self.bound[id.index()] = Some(n);
        n
    }

    pub fn params(&self) -> &Params {
        self.params
    }
}
