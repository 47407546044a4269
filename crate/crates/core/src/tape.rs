//! Define-by-run reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! eagerly computed forward values, and [`Tape::backward`] runs one reverse
//! sweep from a scalar root, accumulating gradients into every node that
//! transitively depends on a gradient-tracked leaf. Inputs always precede
//! their consumers, so a single reverse pass in id order is sufficient.
//!
//! Tapes are cheap and short-lived: training rebuilds one per sample per
//! step. All shape checking happens at op construction and returns
//! [`TapeError`] with the offending shapes; nothing panics on bad shapes.

use std::fmt;

use crate::kernels;
use crate::tensor::{numel_of, ShapeError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(u32);

impl VarId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Error raised when an op is applied to incompatible operands.
#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    /// Two operands that must agree in shape do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the op cannot accept.
    BadOperand {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    /// An index argument (slice bound, embedding row, target id) is out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// The root of a backward sweep is not a scalar.
    NonScalarRoot { shape: Vec<usize> },
    /// A tensor failed basic shape validation.
    Shape(ShapeError),
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")
            }
            TapeError::BadOperand { op, shape, detail } => {
                write!(f, "{op}: operand shape {shape:?} rejected: {detail}")
            }
            TapeError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            TapeError::NonScalarRoot { shape } => {
                write!(f, "backward root must be a scalar, got shape {shape:?}")
            }
            TapeError::Shape(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TapeError {}

impl From<ShapeError> for TapeError {
    fn from(e: ShapeError) -> Self {
        TapeError::Shape(e)
    }
}

/// Largest sigmoid output: the greatest `f64` strictly below 1.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// `a + k * b`.
    AddScaled(VarId, VarId, f64),
    Relu(VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Abs(VarId),
    /// `ln(x + eps)`, defined for all non-negative inputs.
    LogEps(VarId, f64),
    /// Softmax over a rank-1 operand.
    Softmax(VarId),
    /// `[m, n] x [n] -> [m]`.
    MatVec { w: VarId, x: VarId },
    /// Concatenation along axis 0.
    Concat(Vec<VarId>),
    /// Contiguous block `[start, start+len)` along axis 0.
    Slice { x: VarId, start: usize, len: usize },
    /// Same values, new shape with identical element count.
    Reshape(VarId),
    /// One row of a `[rows, dim]` table.
    EmbedRow { table: VarId, row: usize },
    /// Sum of all elements, producing a scalar.
    SumAll(VarId),
    /// 2-D cross-correlation: input `[ci,h,w]`, kernel `[co,ci,kh,kw]`, bias `[co]`.
    Conv2d {
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    },
    /// 2x2 stride-2 max pooling over `[c, h, w]` with even `h`, `w`.
    MaxPool2(VarId),
    /// Max over the spatial axes of `[c, h, w]`, producing `[c]`.
    GlobalMaxPool(VarId),
    /// Attention-weighted spatial sum: `x [c,h,w]`, `attn [1,h,w]` -> `[c]`.
    AttnPool { x: VarId, attn: VarId },
    /// Convex combination `sum_i weights[i] * parts[i]`.
    Blend { weights: VarId, parts: Vec<VarId> },
    /// Summed token cross-entropy over `[steps, vocab]` logits; positions whose
    /// target equals `pad` contribute nothing.
    CrossEntropy {
        logits: VarId,
        targets: Vec<u32>,
        pad: u32,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
}

/// The Wengert list. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward values of a node.
    pub fn values(&self, id: VarId) -> &[f64] {
        &self.nodes[id.idx()].values
    }

    /// Shape of a node.
    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    /// Gradient of the last [`Tape::backward`] root with respect to this node,
    /// if one was accumulated.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id.idx()).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> VarId {
        debug_assert_eq!(numel_of(&shape).unwrap(), values.len());
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            shape,
            values,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    /// Places a tensor on the tape as a leaf. Gradient tracking follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    /// Places raw values on the tape as an untracked constant leaf.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<VarId, TapeError> {
        let n = numel_of(shape)?;
        if n != values.len() {
            return Err(ShapeError::LenMismatch {
                shape: shape.to_vec(),
                expected: n,
                got: values.len(),
            }
            .into());
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values, false))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, shape, values, needs))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TapeError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + k * b`.
    pub fn add_scaled(&mut self, a: VarId, b: VarId, k: f64) -> Result<VarId, TapeError> {
        self.binary_same_shape("add_scaled", a, b, move |x, y| x + k * y, Op::AddScaled(a, b, k))
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let values = self.values(a).iter().map(|v| v * k).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Scale(a, k), shape, values, needs)
    }

    fn unary(&mut self, a: VarId, f: impl Fn(f64) -> f64, op: Op) -> VarId {
        let values = self.values(a).iter().map(|v| f(*v)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(op, shape, values, needs)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a))
    }

    /// Numerically stable logistic function; outputs are clamped into the
    /// open interval `(0, 1)` so downstream logs never see 0 or 1 exactly.
    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, sigmoid_stable, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `ln(x + eps)` elementwise.
    pub fn log_eps(&mut self, a: VarId, eps: f64) -> VarId {
        self.unary(a, move |v| (v + eps).ln(), Op::LogEps(a, eps))
    }

    /// Softmax over a rank-1 operand, computed with max subtraction.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId, TapeError> {
        if self.shape(a).len() != 1 {
            return Err(TapeError::BadOperand {
                op: "softmax",
                shape: self.shape(a).to_vec(),
                detail: "expected a rank-1 operand".into(),
            });
        }
        let values = softmax_slice(self.values(a));
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), shape, values, needs))
    }

    /// `[m, n] x [n] -> [m]`.
    pub fn matvec(&mut self, w: VarId, x: VarId) -> Result<VarId, TapeError> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(TapeError::ShapeMismatch {
                op: "matvec",
                lhs: ws.to_vec(),
                rhs: xs.to_vec(),
            });
        }
        let (rows, cols) = (ws[0], ws[1]);
        let mut out = vec![0.0; rows];
        kernels::matvec(&mut out, self.values(w), self.values(x), rows, cols);
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(Op::MatVec { w, x }, vec![rows], out, needs))
    }

    /// Concatenates along axis 0. All operands must agree on the trailing axes.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId, TapeError> {
        let first = *parts.first().ok_or(TapeError::BadOperand {
            op: "concat",
            shape: vec![],
            detail: "needs at least one operand".into(),
        })?;
        let rank = self.shape(first).len();
        let mut dim0 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || s[1..] != self.shape(first)[1..] {
                return Err(TapeError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            dim0 += s[0];
        }
        let mut shape = self.shape(first).to_vec();
        shape[0] = dim0;
        let mut values = Vec::with_capacity(numel_of(&shape)?);
        for &p in parts {
            values.extend_from_slice(self.values(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat(parts.to_vec()), shape, values, needs))
    }

    /// Contiguous block `[start, start+len)` along axis 0.
    pub fn slice(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, TapeError> {
        let s = self.shape(x);
        if len == 0 {
            return Err(TapeError::BadOperand {
                op: "slice",
                shape: s.to_vec(),
                detail: "zero-length slice".into(),
            });
        }
        let end = start.checked_add(len).ok_or(TapeError::IndexOutOfRange {
            op: "slice",
            index: start,
            bound: s[0],
        })?;
        if end > s[0] {
            return Err(TapeError::IndexOutOfRange {
                op: "slice",
                index: end,
                bound: s[0],
            });
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let values = self.values(x)[start * inner..end * inner].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Slice { x, start, len }, shape, values, needs))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId, TapeError> {
        let n = numel_of(shape)?;
        if n != self.values(x).len() {
            return Err(TapeError::BadOperand {
                op: "reshape",
                shape: self.shape(x).to_vec(),
                detail: format!("cannot reshape to {shape:?}"),
            });
        }
        let values = self.values(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), values, needs))
    }

    /// One row of a `[rows, dim]` table.
    pub fn embed_row(&mut self, table: VarId, row: usize) -> Result<VarId, TapeError> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TapeError::BadOperand {
                op: "embed_row",
                shape: s.to_vec(),
                detail: "expected a rank-2 table".into(),
            });
        }
        if row >= s[0] {
            return Err(TapeError::IndexOutOfRange {
                op: "embed_row",
                index: row,
                bound: s[0],
            });
        }
        let dim = s[1];
        let values = self.values(table)[row * dim..(row + 1) * dim].to_vec();
        let needs = self.needs(table);
        Ok(self.push(Op::EmbedRow { table, row }, vec![dim], values, needs))
    }

    /// Sum of every element, producing a scalar of shape `[1]`.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let total: f64 = self.values(x).iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll(x), vec![1], vec![total], needs)
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input [ci, h, w]`, `kernel [co, ci, kh, kw]`, `bias [co]`; output
    /// spatial dims are `(d + 2*padding - k) / stride + 1` (floor).
    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId, TapeError> {
        let geom = ConvGeom::validate(
            self.shape(input),
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )?;
        let patches = geom.im2col(self.values(input));
        let k = geom.ci * geom.kh * geom.kw;
        let npos = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.co * npos];
        let mut col = vec![0.0; geom.co];
        for pos in 0..npos {
            kernels::matvec(
                &mut col,
                self.values(kernel),
                &patches[pos * k..(pos + 1) * k],
                geom.co,
                k,
            );
            for o in 0..geom.co {
                out[o * npos + pos] = col[o] + self.values(bias)[o];
            }
        }
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            vec![geom.co, geom.oh, geom.ow],
            out,
            needs,
        ))
    }

    /// 2x2 stride-2 max pooling; `h` and `w` must be even.
    pub fn max_pool2(&mut self, x: VarId) -> Result<VarId, TapeError> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TapeError::BadOperand {
                op: "max_pool2",
                shape: s.to_vec(),
                detail: "expected [c, h, w] with even h and w".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let v = self.values(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let val = v[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                            if val > best {
                                best = val;
                            }
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = best;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPool2(x), vec![c, oh, ow], out, needs))
    }

    /// Max over the spatial axes of `[c, h, w]`, producing `[c]`.
    pub fn global_max_pool(&mut self, x: VarId) -> Result<VarId, TapeError> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(TapeError::BadOperand {
                op: "global_max_pool",
                shape: s.to_vec(),
                detail: "expected [c, h, w]".into(),
            });
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let v = self.values(x);
        let out: Vec<f64> = (0..c)
            .map(|ch| v[ch * hw..(ch + 1) * hw].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Op::GlobalMaxPool(x), vec![c], out, needs))
    }

    /// Attention-weighted spatial sum: `out[ch] = sum_p attn[p] * x[ch, p]`.
    pub fn attn_pool(&mut self, x: VarId, attn: VarId) -> Result<VarId, TapeError> {
        let (xs, as_) = (self.shape(x), self.shape(attn));
        if xs.len() != 3 || as_.len() != 3 || as_[0] != 1 || as_[1] != xs[1] || as_[2] != xs[2] {
            return Err(TapeError::ShapeMismatch {
                op: "attn_pool",
                lhs: xs.to_vec(),
                rhs: as_.to_vec(),
            });
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let a = self.values(attn);
        let xv = self.values(x);
        let out: Vec<f64> = (0..c).map(|ch| kernels::dot(&xv[ch * hw..(ch + 1) * hw], a)).collect();
        let needs = self.needs(x) || self.needs(attn);
        Ok(self.push(Op::AttnPool { x, attn }, vec![c], out, needs))
    }

    /// Convex combination of equally shaped parts with a `[k]` weight vector.
    pub fn blend(&mut self, weights: VarId, parts: &[VarId]) -> Result<VarId, TapeError> {
        let ws = self.shape(weights);
        if ws.len() != 1 || ws[0] != parts.len() || parts.is_empty() {
            return Err(TapeError::BadOperand {
                op: "blend",
                shape: ws.to_vec(),
                detail: format!("weight count must equal part count {}", parts.len()),
            });
        }
        let first = parts[0];
        for &p in parts {
            if self.shape(p) != self.shape(first) {
                return Err(TapeError::ShapeMismatch {
                    op: "blend",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let mut out = vec![0.0; self.values(first).len()];
        for (i, &p) in parts.iter().enumerate() {
            let w = self.values(weights)[i];
            kernels::axpy(&mut out, w, self.values(p));
        }
        let shape = self.shape(first).to_vec();
        let needs = self.needs(weights) || parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Blend {
                weights,
                parts: parts.to_vec(),
            },
            shape,
            out,
            needs,
        ))
    }

    /// Summed token cross-entropy over `[steps, vocab]` logits.
    ///
    /// Position `t` contributes `logsumexp(logits[t]) - logits[t, targets[t]]`;
    /// positions whose target equals `pad` are skipped. The result is the sum
    /// over contributing positions (no averaging).
    pub fn cross_entropy(
        &mut self,
        logits: VarId,
        targets: &[u32],
        pad: u32,
    ) -> Result<VarId, TapeError> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(TapeError::BadOperand {
                op: "cross_entropy",
                shape: s.to_vec(),
                detail: "expected [steps, vocab] logits".into(),
            });
        }
        let (steps, vocab) = (s[0], s[1]);
        if targets.len() != steps {
            return Err(TapeError::BadOperand {
                op: "cross_entropy",
                shape: s.to_vec(),
                detail: format!("expected {steps} targets, got {}", targets.len()),
            });
        }
        for &t in targets {
            if t != pad && t as usize >= vocab {
                return Err(TapeError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t as usize,
                    bound: vocab,
                });
            }
        }
        let v = self.values(logits);
        let mut total = 0.0;
        for (t, &tgt) in targets.iter().enumerate() {
            if tgt == pad {
                continue;
            }
            let row = &v[t * vocab..(t + 1) * vocab];
            total += log_sum_exp(row) - row[tgt as usize];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
            },
            vec![1],
            vec![total],
            needs,
        ))
    }

    /// Runs the reverse sweep from a scalar root, accumulating gradients for
    /// every node on a path from a gradient-tracked leaf to the root.
    pub fn backward(&mut self, root: VarId) -> Result<(), TapeError> {
        let root_node = &self.nodes[root.idx()];
        if root_node.values.len() != 1 {
            return Err(TapeError::NonScalarRoot {
                shape: root_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.idx()] = Some(vec![1.0]);
        for i in (0..=root.idx()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Distributes `g`, the gradient at node `i`, to the node's inputs.
    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Accumulator access: allocate the input's gradient on first touch.
        macro_rules! acc {
            ($id:expr) => {{
                let idx = $id.idx();
                grads[idx].get_or_insert_with(|| vec![0.0; self.nodes[idx].values.len()])
            }};
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    kernels::axpy(acc!(a), 1.0, g);
                }
                if self.needs(*b) {
                    kernels::axpy(acc!(b), 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    kernels::axpy(acc!(a), 1.0, g);
                }
                if self.needs(*b) {
                    kernels::axpy(acc!(b), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = &self.nodes[b.idx()].values;
                    let da = acc!(a);
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.idx()].values;
                    let db = acc!(b);
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    kernels::axpy(acc!(a), *k, g);
                }
            }
            Op::AddScaled(a, b, k) => {
                if self.needs(*a) {
                    kernels::axpy(acc!(a), 1.0, g);
                }
                if self.needs(*b) {
                    kernels::axpy(acc!(b), *k, g);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = &self.nodes[a.idx()].values;
                    let da = acc!(a);
                    for j in 0..g.len() {
                        if av[j] > 0.0 {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let s = &node.values;
                    let da = acc!(a);
                    for j in 0..g.len() {
                        da[j] += g[j] * s[j] * (1.0 - s[j]);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let t = &node.values;
                    let da = acc!(a);
                    for j in 0..g.len() {
                        da[j] += g[j] * (1.0 - t[j] * t[j]);
                    }
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let av = &self.nodes[a.idx()].values;
                    let da = acc!(a);
                    for j in 0..g.len() {
                        da[j] += g[j] * if av[j] > 0.0 { 1.0 } else if av[j] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::LogEps(a, eps) => {
                if self.needs(*a) {
                    let av = &self.nodes[a.idx()].values;
                    let da = acc!(a);
                    for j in 0..g.len() {
                        da[j] += g[j] / (av[j] + eps);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let s = &node.values;
                    let gs: f64 = kernels::dot(g, s);
                    let da = acc!(a);
                    for j in 0..g.len() {
                        da[j] += s[j] * (g[j] - gs);
                    }
                }
            }
            Op::MatVec { w, x } => {
                let (rows, cols) = (self.nodes[w.idx()].shape[0], self.nodes[w.idx()].shape[1]);
                if self.needs(*w) {
                    let xv = &self.nodes[x.idx()].values;
                    let dw = acc!(w);
                    for r in 0..rows {
                        kernels::axpy(&mut dw[r * cols..(r + 1) * cols], g[r], xv);
                    }
                }
                if self.needs(*x) {
                    let wv = &self.nodes[w.idx()].values;
                    let dx = acc!(x);
                    for r in 0..rows {
                        kernels::axpy(dx, g[r], &wv[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.idx()].values.len();
                    if self.needs(p) {
                        kernels::axpy(acc!(p), 1.0, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start, len } => {
                if self.needs(*x) {
                    let inner: usize = self.nodes[x.idx()].shape[1..].iter().product();
                    let dx = acc!(x);
                    kernels::axpy(&mut dx[start * inner..(start + len) * inner], 1.0, g);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    kernels::axpy(acc!(a), 1.0, g);
                }
            }
            Op::EmbedRow { table, row } => {
                if self.needs(*table) {
                    let dim = self.nodes[table.idx()].shape[1];
                    let dt = acc!(table);
                    kernels::axpy(&mut dt[row * dim..(row + 1) * dim], 1.0, g);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let da = acc!(a);
                    let gv = g[0];
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let geom = ConvGeom::validate(
                    &self.nodes[input.idx()].shape,
                    &self.nodes[kernel.idx()].shape,
                    &self.nodes[bias.idx()].shape,
                    *stride,
                    *padding,
                )
                .expect("conv geometry was validated at construction");
                let k = geom.ci * geom.kh * geom.kw;
                let npos = geom.oh * geom.ow;
                if self.needs(*bias) {
                    let db = acc!(bias);
                    for o in 0..geom.co {
                        db[o] += g[o * npos..(o + 1) * npos].iter().sum::<f64>();
                    }
                }
                if self.needs(*kernel) {
                    let patches = geom.im2col(&self.nodes[input.idx()].values);
                    let dk = acc!(kernel);
                    for pos in 0..npos {
                        let patch = &patches[pos * k..(pos + 1) * k];
                        for o in 0..geom.co {
                            kernels::axpy(&mut dk[o * k..(o + 1) * k], g[o * npos + pos], patch);
                        }
                    }
                }
                if self.needs(*input) {
                    let kv = &self.nodes[kernel.idx()].values;
                    let mut dpatch = vec![0.0; k];
                    let di = acc!(input);
                    for pos in 0..npos {
                        dpatch.iter_mut().for_each(|v| *v = 0.0);
                        for o in 0..geom.co {
                            kernels::axpy(&mut dpatch, g[o * npos + pos], &kv[o * k..(o + 1) * k]);
                        }
                        geom.col2im_add(di, pos, &dpatch);
                    }
                }
            }
            Op::MaxPool2(x) => {
                if self.needs(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let xv = &self.nodes[x.idx()].values;
                    let dx = acc!(x);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                // First maximum in scan order wins ties,
                                // matching no particular framework but fixed.
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for dy in 0..2 {
                                    for dx_ in 0..2 {
                                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx_;
                                        if xv[idx] > best {
                                            best = xv[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                dx[best_idx] += g[ch * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::GlobalMaxPool(x) => {
                if self.needs(*x) {
                    let s = &self.nodes[x.idx()].shape;
                    let (c, hw) = (s[0], s[1] * s[2]);
                    let xv = &self.nodes[x.idx()].values;
                    let dx = acc!(x);
                    for ch in 0..c {
                        let row = &xv[ch * hw..(ch + 1) * hw];
                        let mut best = f64::NEG_INFINITY;
                        let mut best_j = 0;
                        for (j, &v) in row.iter().enumerate() {
                            if v > best {
                                best = v;
                                best_j = j;
                            }
                        }
                        dx[ch * hw + best_j] += g[ch];
                    }
                }
            }
            Op::AttnPool { x, attn } => {
                let (c, hw) = {
                    let s = &self.nodes[x.idx()].shape;
                    (s[0], s[1] * s[2])
                };
                if self.needs(*x) {
                    let av = &self.nodes[attn.idx()].values;
                    let dx = acc!(x);
                    for ch in 0..c {
                        kernels::axpy(&mut dx[ch * hw..(ch + 1) * hw], g[ch], av);
                    }
                }
                if self.needs(*attn) {
                    let xv = &self.nodes[x.idx()].values;
                    let da = acc!(attn);
                    for ch in 0..c {
                        kernels::axpy(da, g[ch], &xv[ch * hw..(ch + 1) * hw]);
                    }
                }
            }
            Op::Blend { weights, parts } => {
                for (j, &p) in parts.iter().enumerate() {
                    if self.needs(*weights) {
                        let contrib = kernels::dot(g, &self.nodes[p.idx()].values);
                        acc!(weights)[j] += contrib;
                    }
                    if self.needs(p) {
                        let w = self.nodes[weights.idx()].values[j];
                        kernels::axpy(acc!(p), w, g);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
            } => {
                if self.needs(*logits) {
                    let vocab = self.nodes[logits.idx()].shape[1];
                    let lv = &self.nodes[logits.idx()].values;
                    let gv = g[0];
                    let dl = acc!(logits);
                    for (t, &tgt) in targets.iter().enumerate() {
                        if tgt == *pad {
                            continue;
                        }
                        let row = &lv[t * vocab..(t + 1) * vocab];
                        let p = softmax_slice(row);
                        let drow = &mut dl[t * vocab..(t + 1) * vocab];
                        kernels::axpy(drow, gv, &p);
                        drow[tgt as usize] -= gv;
                    }
                }
            }
        }
    }
}

/// Stable logistic function clamped into the open interval `(0, 1)`.
pub fn sigmoid_stable(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

/// Softmax of a slice with max subtraction.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// `ln(sum_i exp(x_i))` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Validated convolution geometry shared by forward and backward.
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn validate(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TapeError> {
        if input.len() != 3 {
            return Err(TapeError::BadOperand {
                op: "conv2d",
                shape: input.to_vec(),
                detail: "expected [ci, h, w] input".into(),
            });
        }
        if kernel.len() != 4 {
            return Err(TapeError::BadOperand {
                op: "conv2d",
                shape: kernel.to_vec(),
                detail: "expected [co, ci, kh, kw] kernel".into(),
            });
        }
        if stride == 0 {
            return Err(TapeError::BadOperand {
                op: "conv2d",
                shape: kernel.to_vec(),
                detail: "stride must be positive".into(),
            });
        }
        let (ci, h, w) = (input[0], input[1], input[2]);
        let (co, kci, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kci != ci {
            return Err(TapeError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if bias.len() != 1 || bias[0] != co {
            return Err(TapeError::ShapeMismatch {
                op: "conv2d",
                lhs: kernel.to_vec(),
                rhs: bias.to_vec(),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TapeError::BadOperand {
                op: "conv2d",
                shape: input.to_vec(),
                detail: format!("kernel {kh}x{kw} exceeds padded input"),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    /// Gathers receptive fields into position-major patches:
    /// `patches[pos * K + (c*kh + ky)*kw + kx]`, zero outside the input.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let k = self.ci * self.kh * self.kw;
        let mut patches = vec![0.0; self.oh * self.ow * k];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let pos = oy * self.ow + ox;
                let base = pos * k;
                for c in 0..self.ci {
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            patches[base + (c * self.kh + ky) * self.kw + kx] =
                                input[c * self.h * self.w + iy as usize * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        patches
    }

    /// Scatter-adds one position's patch gradient back into the input gradient.
    fn col2im_add(&self, dinput: &mut [f64], pos: usize, dpatch: &[f64]) {
        let (oy, ox) = (pos / self.ow, pos % self.ow);
        for c in 0..self.ci {
            for ky in 0..self.kh {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for kx in 0..self.kw {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix < 0 || ix >= self.w as isize {
                        continue;
                    }
                    dinput[c * self.h * self.w + iy as usize * self.w + ix as usize] +=
                        dpatch[(c * self.kh + ky) * self.kw + kx];
                }
            }
        }
    }
}
