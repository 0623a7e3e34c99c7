use std::cell::Cell;
use std::sync::Arc;

use super::kernels;
use super::{numel, Result, ShapeDisplay, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds, one per backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Relu,
    MatMul,
    Transpose,
    Softmax,
    Sum,
    Mean,
    Reshape,
    Narrow,
    Concat,
    LayerNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::LayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::LayerNorm => "layer_norm",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Deliberately corrupts the backward rule of `kind` on the current thread
/// (input gradients scaled by 1.5). Exists so gradient checks can prove they
/// detect a broken rule; pass `None` to restore correct behaviour.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

/// Boolean attention mask over the last two axes of a softmax input.
/// `allowed[r * cols + c]` is true where query `r` may attend to key `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Arc<[bool]>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: allowed.len(),
                shape: ShapeDisplay(vec![rows, cols]),
            });
        }
        if (0..rows).any(|r| !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a)) {
            return Err(TensorError::Invalid("mask row with no allowed position".into()));
        }
        Ok(Self {
            rows,
            cols,
            allowed: allowed.into(),
        })
    }

    /// Lower-triangular mask: position `t` sees positions `0..=t`.
    pub fn causal(len: usize) -> Self {
        let allowed: Vec<bool> = (0..len * len).map(|i| i % len <= i / len).collect();
        Self {
            rows: len,
            cols: len,
            allowed: allowed.into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    // masked entries have zero output, so the backward rule needs no mask
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
        })
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of primitive operations for one forward pass.
///
/// Nodes are appended in execution order, so the tape is always topologically
/// sorted. [`Graph::backward`] walks it once in reverse and then marks the
/// graph consumed; values stay readable afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.into(),
        rhs: b.into(),
    }
}

/// Shape of a binary elementwise result. Operands must match, or one of them
/// must be a scalar or a trailing suffix of the other (leading-batch broadcast).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && b.len() <= a.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(mismatch(op, a, b))
}

/// Elementwise map where the shorter operand tiles over the longer one.
fn zip_tiled(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if a.len() == n && b.len() == n {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if a.len() == n {
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// Sums a full-size gradient back onto an operand of `len` elements.
fn reduce_tiled(g: Vec<f64>, len: usize) -> Vec<f64> {
    if g.len() == len {
        return g;
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch bookkeeping for a matmul: how many independent products, and the
/// strides to step through each operand per product.
struct MatMulPlan {
    m: usize,
    k: usize,
    p: usize,
    batches: usize,
    a_stride: usize,
    b_stride: usize,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let mut out_shape;
    let plan = if bb.is_empty() {
        // (.., m, k) x (k, p): one product over all leading rows.
        out_shape = ba.to_vec();
        MatMulPlan {
            m: numel(ba) * m,
            k,
            p,
            batches: 1,
            a_stride: 0,
            b_stride: 0,
            out_shape: Vec::new(),
        }
    } else if ba.is_empty() {
        out_shape = bb.to_vec();
        MatMulPlan {
            m,
            k,
            p,
            batches: numel(bb),
            a_stride: 0,
            b_stride: k * p,
            out_shape: Vec::new(),
        }
    } else if ba == bb {
        out_shape = ba.to_vec();
        MatMulPlan {
            m,
            k,
            p,
            batches: numel(ba),
            a_stride: m * k,
            b_stride: k * p,
            out_shape: Vec::new(),
        }
    } else {
        return Err(mismatch("matmul", a, b));
    };
    out_shape.extend([m, p]);
    Ok(MatMulPlan { out_shape, ..plan })
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.into(),
        });
    }
    Ok(())
}

/// (outer, dim, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn transpose_last2(shape: &[usize], x: &[f64]) -> Vec<f64> {
    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(r * c) {
        out.extend(kernels::transpose(r, c, chunk));
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a graph input, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape, t.data, Op::Leaf, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// A leaf that always receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass; present for every leaf with
    /// `requires_grad`, absent for constants.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let n = numel(&shape);
        let value = zip_tiled(self.value(a), self.value(b), n, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one operand must be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = plan_matmul(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let out_mat = plan.m * plan.p;
        let mut out = vec![0.0; plan.batches * out_mat];
        for bi in 0..plan.batches {
            let a_off = bi * plan.a_stride;
            let b_off = bi * plan.b_stride;
            kernels::gemm_nn(
                plan.m,
                plan.k,
                plan.p,
                &av[a_off..a_off + plan.m * plan.k],
                &bv[b_off..b_off + plan.k * plan.p],
                &mut out[bi * out_mat..(bi + 1) * out_mat],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(plan.out_shape, out, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                shape: shape.into(),
            });
        }
        let value = transpose_last2(shape, self.value(a));
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let rg = self.rg(a);
        Ok(self.push(out_shape, value, Op::Transpose(a), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax over the last axis where disallowed positions get exactly zero
    /// weight. The mask covers the last two axes of `x`.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape.len();
        if n < 2 || shape[n - 2] != mask.rows || shape[n - 1] != mask.cols {
            return Err(mismatch("masked_softmax", shape, &[mask.rows, mask.cols]));
        }
        self.softmax_impl(x, n - 1, Some(mask.clone()))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; xv.len()];
        let mut buf = vec![0.0; dim];
        for o in 0..outer {
            // with a mask, axis is last (inner == 1) and the row is o % rows
            let allowed = |d: usize| match &mask {
                Some(m) => m.allows(o % m.rows, d),
                None => true,
            };
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut max = f64::NEG_INFINITY;
                for d in 0..dim {
                    if allowed(d) {
                        max = max.max(xv[base + d * inner]);
                    }
                }
                let mut sum = 0.0;
                for (d, slot) in buf.iter_mut().enumerate() {
                    *slot = if allowed(d) {
                        (xv[base + d * inner] - max).exp()
                    } else {
                        0.0
                    };
                    sum += *slot;
                }
                for (d, &e) in buf.iter().enumerate() {
                    out[base + d * inner] = e / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow: range {start}..{} outside axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Narrow { x, axis, start }, rg))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        check_axis("concat", &base_shape, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let chunk = d * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Standardizes the last axis then applies `gain` and `bias` (both of
    /// length equal to the last axis). `eps` is added to the variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(TensorError::Invalid(format!(
                "layer_norm needs a last axis of at least 2, got {shape:?}"
            )));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`. Afterwards every leaf with
    /// `requires_grad` holds a gradient (zeros when unreachable) and the graph
    /// is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(
                self.nodes[loss.0].shape.as_slice().into(),
            ));
        }
        self.consumed = true;
        let fault = BACKWARD_FAULT.with(|f| f.get());
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else {
                continue;
            };
            let contributions = backward_rule(node, &g, before);
            let corrupt = fault.is_some() && node.op.kind() == fault;
            for (v, mut grad) in contributions {
                if corrupt {
                    grad.iter_mut().for_each(|x| *x *= 1.5);
                }
                let target = &mut before[v.0];
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    None => target.grad = Some(grad),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }
}

/// Gradients of a node's inputs given the gradient `g` of its output. Only
/// inputs that require gradients are returned.
fn backward_rule(node: &Node, g: &[f64], nodes: &[Node]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let rg = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            if rg(*a) {
                out.push((*a, reduce_tiled(g.to_vec(), val(*a).len())));
            }
            if rg(*b) {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let gb: Vec<f64> = g.iter().map(|x| sign * x).collect();
                out.push((*b, reduce_tiled(gb, val(*b).len())));
            }
        }
        Op::Mul(a, b) => {
            let n = g.len();
            if rg(*a) {
                let ga = zip_tiled(g, val(*b), n, |x, y| x * y);
                out.push((*a, reduce_tiled(ga, val(*a).len())));
            }
            if rg(*b) {
                let gb = zip_tiled(g, val(*a), n, |x, y| x * y);
                out.push((*b, reduce_tiled(gb, val(*b).len())));
            }
        }
        Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
        Op::Tanh(a) => out.push((
            *a,
            g.iter()
                .zip(&node.value)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        )),
        Op::Sigmoid(a) => out.push((
            *a,
            g.iter()
                .zip(&node.value)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )),
        Op::Relu(a) => out.push((
            *a,
            g.iter()
                .zip(val(*a))
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        )),
        Op::MatMul(a, b) => {
            let plan = plan_matmul(&nodes[a.0].shape, &nodes[b.0].shape)
                .expect("validated in forward");
            let (av, bv) = (val(*a), val(*b));
            let (m, k, p) = (plan.m, plan.k, plan.p);
            if rg(*a) {
                let mut ga = vec![0.0; av.len()];
                for bi in 0..plan.batches {
                    let a_off = bi * plan.a_stride;
                    let b_off = bi * plan.b_stride;
                    kernels::gemm_nt_acc(
                        m,
                        k,
                        p,
                        &g[bi * m * p..(bi + 1) * m * p],
                        &bv[b_off..b_off + k * p],
                        &mut ga[a_off..a_off + m * k],
                    );
                }
                out.push((*a, ga));
            }
            if rg(*b) {
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..plan.batches {
                    let a_off = bi * plan.a_stride;
                    let b_off = bi * plan.b_stride;
                    kernels::gemm_tn_acc(
                        m,
                        k,
                        p,
                        &av[a_off..a_off + m * k],
                        &g[bi * m * p..(bi + 1) * m * p],
                        &mut gb[b_off..b_off + k * p],
                    );
                }
                out.push((*b, gb));
            }
        }
        Op::Transpose(a) => out.push((*a, transpose_last2(&node.shape, g))),
        Op::Softmax { x, axis, .. } => {
            let (outer, dim, inner) = split_axis(&node.shape, *axis);
            let y = &node.value;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let dot: f64 = (0..dim)
                        .map(|d| g[base + d * inner] * y[base + d * inner])
                        .sum();
                    for d in 0..dim {
                        let idx = base + d * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            out.push((*x, gx));
        }
        Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
        Op::Mean(x) => {
            let n = val(*x).len();
            out.push((*x, vec![g[0] / n as f64; n]));
        }
        Op::Reshape(x) => out.push((*x, g.to_vec())),
        Op::Narrow { x, axis, start } => {
            let in_shape = &nodes[x.0].shape;
            let (outer, dim, inner) = split_axis(in_shape, *axis);
            let len = node.shape[*axis];
            let mut gx = vec![0.0; numel(in_shape)];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                gx[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            out.push((*x, gx));
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &v in xs {
                let d = nodes[v.0].shape[*axis];
                if rg(v) {
                    let mut gv = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[src..src + d * inner]);
                    }
                    out.push((v, gv));
                }
                offset += d;
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = *node.shape.last().expect("validated");
            let gv = val(*gain);
            let rows = g.len() / d;
            if rg(*x) {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        gx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                out.push((*x, gx));
            }
            if rg(*gain) {
                let mut gg = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                out.push((*gain, gg));
            }
            if rg(*bias) {
                out.push((*bias, reduce_tiled(g.to_vec(), d)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia), &[1., 2., 3., 4.]);
        let ab = g.matmul(a, b).unwrap();
        // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
        assert_eq!(g.value(ab), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_batched_shape_contract() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 12, 128]));
        let b = g.constant(Tensor::zeros(&[128, 64]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[3, 12, 64]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        for (v, want) in g.value(y).iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0., f64::NAN]));
        assert_eq!(
            g.softmax(x, 0).unwrap_err(),
            TensorError::NonFinite { op: "softmax" }
        );
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        for c in 0..3 {
            assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_future() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = g.masked_softmax(x, &Mask::causal(3)).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let th = g.tanh(z);
        assert_eq!(g.item(s), 0.5);
        assert_eq!(g.item(th), 0.0);
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4., 6.]);
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4]));
        let suffix = g.constant(Tensor::full(&[4], 1.0));
        let scalar = g.constant(Tensor::scalar(2.0));
        let wrong = g.constant(Tensor::zeros(&[3]));
        let sum = g.add(a, suffix).unwrap();
        assert_eq!(g.shape(sum), &[2, 3, 4]);
        let s = g.mul(scalar, a).unwrap();
        assert_eq!(g.shape(s), &[2, 3, 4]);
        assert!(g.add(a, wrong).is_err());
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[0.3, -1.0, 2.0, 5.0]));
        let s1 = g.sum(x);
        let s2 = g.sum(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn constants_get_no_grad_and_unused_params_get_zeros() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1., 2.]));
        let x = g.param(t(&[2], &[3., 4.]));
        let unused = g.param(t(&[3], &[1., 1., 1.]));
        let y = g.mul(c, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1., 2.]);
        assert_eq!(g.grad(unused).unwrap(), &[0.; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[4], 1.0));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1., 3.]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5)
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y)[0] + s).abs() < 1e-15);
        assert!((g.value(y)[1] - s).abs() < 1e-15);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 5, 3], |i| i as f64));
        let a = g.narrow(x, 1, 0, 2).unwrap();
        let b = g.narrow(x, 1, 2, 3).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
        assert!(g.narrow(x, 1, 4, 2).is_err());
    }
}
