use std::fmt;

use super::{Real, Result, Tensor, TensorError, NORM_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation. Used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Exp,
    Log,
    Relu,
    Reshape,
    ConcatFlatten,
    MatMul,
    Mean,
    Sum,
    SoftmaxCrossEntropy,
    L2Normalize,
    Gather,
    AddBias,
    UnfoldTime,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 18] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Relu,
        OpKind::Reshape,
        OpKind::ConcatFlatten,
        OpKind::MatMul,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::SoftmaxCrossEntropy,
        OpKind::L2Normalize,
        OpKind::Gather,
        OpKind::AddBias,
        OpKind::UnfoldTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::Reshape => "reshape",
            OpKind::ConcatFlatten => "concat_flatten",
            OpKind::MatMul => "matmul",
            OpKind::Mean => "mean_over_axes",
            OpKind::Sum => "sum",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Gather => "gather",
            OpKind::AddBias => "add_bias",
            OpKind::UnfoldTime => "unfold_time",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, Real),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Reshape(Var),
    ConcatFlatten(Vec<Var>),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    // out_index[i] is the output slot that input element i is averaged into.
    Mean { input: Var, out_index: Vec<usize>, count: usize },
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, target: usize, probs: Vec<Real> },
    L2Normalize { input: Var, norm: Real },
    Gather { input: Var, indices: Vec<usize> },
    AddBias { x: Var, bias: Var, cols: usize },
    // For each output element, the source element or None for zero padding.
    UnfoldTime { input: Var, source: Vec<Option<usize>> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Relu(..) => OpKind::Relu,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ConcatFlatten(..) => OpKind::ConcatFlatten,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Gather { .. } => OpKind::Gather,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::UnfoldTime { .. } => OpKind::UnfoldTime,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<Real>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in execution order, which is a topological order of the
/// computation graph, so the backward pass is a single reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    fault: Option<OpKind>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, with zeros standing in for an absent gradient.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<Real> {
        self.get(v).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn accumulate(slot: &mut Option<Vec<Real>>, contribution: Vec<Real>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects non-finite intermediates and out-of-domain inputs.
    pub fn checked() -> Self {
        Self { checked: true, ..Self::default() }
    }

    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    /// Flip the sign of every gradient propagated by operations of `kind`.
    /// Only meant for exercising the gradient checker.
    pub fn with_fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> Real {
        self.nodes[v.0].value[0]
    }

    /// Smallest `|x|` over every relu input recorded so far; infinite when
    /// the tape holds no relu. Finite differences are only meaningful when
    /// this exceeds the perturbation's effect on those inputs.
    pub fn relu_margin(&self) -> Real {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flatten()
            .fold(Real::INFINITY, |m, x| m.min(x.abs()))
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy `t` onto the tape. Its `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Place a value on the tape that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<Real>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Invalid(format!(
                "constant of shape {:?} given {} values",
                shape,
                data.len()
            )));
        }
        self.push_leaf(shape, data, false)
    }

    /// Place a value on the tape that receives a gradient.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<Real>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Invalid(format!(
                "variable of shape {:?} given {} values",
                shape,
                data.len()
            )));
        }
        self.push_leaf(shape, data, true)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<Real>, requires_grad: bool) -> Result<Var> {
        if self.checked && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { shape, value: data, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.checked && value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.kind().name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Dimension {
                op,
                detail: format!("shapes {:?} and {:?} differ", sa, sb),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Vec<Real> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(Real) -> Real) -> Vec<Real> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, c: Real) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.push(self.shape(a).to_vec(), out, Op::ScalarMul(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Result<Var> {
        let out = self.map(a, |x| x + c);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, Real::exp);
        self.push(self.shape(a).to_vec(), out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.checked {
            if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("input {bad} is not strictly positive"),
                });
            }
        }
        let out = self.map(a, Real::ln);
        self.push(self.shape(a).to_vec(), out, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    /// Reinterpret the row-major element sequence under a new shape.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {:?}", self.shape(a), shape),
            });
        }
        let out = self.value(a).to_vec();
        self.push(shape, out, Op::Reshape(a), &[a])
    }

    /// Flatten each input in row-major order and concatenate into one vector.
    pub fn concat_flatten(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Dimension {
                op: "concat_flatten",
                detail: "no inputs".into(),
            });
        }
        let out: Vec<Real> = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push(vec![out.len()], out, Op::ConcatFlatten(parts.to_vec()), parts)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                detail: format!("cannot multiply {:?} by {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Arithmetic mean over `axes`; the reduced axes are removed from the shape.
    pub fn mean_over_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axes.is_empty() {
            return Err(TensorError::Dimension {
                op: "mean_over_axes",
                detail: "empty axis set; use reshape for an identity".into(),
            });
        }
        let mut reduce = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(TensorError::Dimension {
                    op: "mean_over_axes",
                    detail: format!("axis {ax} out of range for shape {:?}", shape),
                });
            }
            if reduce[ax] {
                return Err(TensorError::Dimension {
                    op: "mean_over_axes",
                    detail: format!("axis {ax} listed twice"),
                });
            }
            reduce[ax] = true;
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduce).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let count: usize = shape.iter().zip(&reduce).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        if count == 0 {
            return Err(TensorError::Dimension {
                op: "mean_over_axes",
                detail: format!("mean over an empty extent of {:?}", shape),
            });
        }

        let total = numel(&shape);
        let mut out_index = Vec::with_capacity(total);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..total {
            let mut o = 0;
            for (ax, &c) in coord.iter().enumerate() {
                if !reduce[ax] {
                    o = o * shape[ax] + c;
                }
            }
            out_index.push(o);
            for ax in (0..shape.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }

        let mut out = vec![0.0; numel(&out_shape)];
        for (&x, &o) in self.value(a).iter().zip(&out_index) {
            out[o] += x;
        }
        let scale = 1.0 / count as Real;
        out.iter_mut().for_each(|v| *v *= scale);
        self.push(out_shape, out, Op::Mean { input: a, out_index, count }, &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: Real = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    /// `-log softmax(logits)[target]`, computed with max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 1 || shape[0] < 2 {
            return Err(TensorError::Dimension {
                op: "softmax_cross_entropy",
                detail: format!("logits must be a vector of length >= 2, got {:?}", shape),
            });
        }
        let k = shape[0];
        if target >= k {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                detail: format!("target {target} outside [0, {k})"),
            });
        }
        let z = self.value(logits);
        let max = z.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let exps: Vec<Real> = z.iter().map(|&v| (v - max).exp()).collect();
        let denom: Real = exps.iter().sum();
        let loss = denom.ln() - (z[target] - max);
        let probs = exps.into_iter().map(|e| e / denom).collect();
        self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, target, probs },
            &[logits],
        )
    }

    /// `v / ‖v‖` for a vector `v`.
    pub fn l2_normalize(&mut self, v: Var) -> Result<Var> {
        if self.shape(v).len() != 1 {
            return Err(TensorError::Dimension {
                op: "l2_normalize",
                detail: format!("expected a vector, got {:?}", self.shape(v)),
            });
        }
        let norm = l2_norm(self.value(v));
        if !(norm > NORM_EPS) {
            return Err(TensorError::Degenerate {
                op: "l2_normalize",
                norm: norm as f64,
                eps: NORM_EPS as f64,
            });
        }
        let out = self.map(v, |x| x / norm);
        self.push(self.shape(v).to_vec(), out, Op::L2Normalize { input: v, norm }, &[v])
    }

    /// Pick elements of a vector by index. Indices may repeat.
    pub fn gather(&mut self, v: Var, indices: &[usize]) -> Result<Var> {
        let len = self.value(v).len();
        if self.shape(v).len() != 1 {
            return Err(TensorError::Dimension {
                op: "gather",
                detail: format!("expected a vector, got {:?}", self.shape(v)),
            });
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Index {
                op: "gather",
                detail: format!("index {bad} outside [0, {len})"),
            });
        }
        let src = self.value(v);
        let out: Vec<Real> = indices.iter().map(|&i| src[i]).collect();
        self.push(vec![out.len()], out, Op::Gather { input: v, indices: indices.to_vec() }, &[v])
    }

    /// Add `bias[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "add_bias",
                detail: format!("cannot add bias {:?} to rows of {:?}", sb, sx),
            });
        }
        let cols = sx[1];
        let b = self.value(bias);
        let out: Vec<Real> =
            self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias, cols }, &[x, bias])
    }

    /// Temporal im2col for a `[J×T×C]` feature map.
    ///
    /// Produces `[J·T_out × kernel·C]` where row `(j, t)` holds the `kernel`
    /// frames centred on input frame `t·stride`, zero-padded at the borders.
    /// `kernel` must be odd; `T_out = ceil(T / stride)`.
    pub fn unfold_time(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Dimension {
                op: "unfold_time",
                detail: format!("expected [J, T, C], got {:?}", shape),
            });
        }
        if kernel == 0 || kernel % 2 == 0 || stride == 0 {
            return Err(TensorError::Dimension {
                op: "unfold_time",
                detail: format!("kernel {kernel} must be odd and stride {stride} positive"),
            });
        }
        let (joints, frames, ch) = (shape[0], shape[1], shape[2]);
        let pad = kernel / 2;
        let out_frames = frames.div_ceil(stride);
        let cols = kernel * ch;
        let mut source = Vec::with_capacity(joints * out_frames * cols);
        for j in 0..joints {
            for to in 0..out_frames {
                for kk in 0..kernel {
                    let t = (to * stride + kk) as isize - pad as isize;
                    for c in 0..ch {
                        source.push(if t >= 0 && (t as usize) < frames {
                            Some((j * frames + t as usize) * ch + c)
                        } else {
                            None
                        });
                    }
                }
            }
        }
        let src = self.value(x);
        let out: Vec<Real> = source.iter().map(|s| s.map_or(0.0, |i| src[i])).collect();
        self.push(vec![joints * out_frames, cols], out, Op::UnfoldTime { input: x, source }, &[x])
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(TensorError::Dimension {
                op: "backward",
                detail: format!("output must be a scalar, got shape {:?}", out_node.shape),
            });
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        if !out_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let sign: Real = if self.fault == Some(node.op.kind()) { -1.0 } else { 1.0 };
            let send = |grads: &mut Vec<Option<Vec<Real>>>, to: Var, mut c: Vec<Real>| {
                if self.nodes[to.0].requires_grad {
                    if sign < 0.0 {
                        c.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads[to.0], c);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::ScalarMul(a, c) => send(&mut grads, *a, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(a) => send(&mut grads, *a, g.clone()),
                Op::Exp(a) => {
                    let ga = g.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                    send(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.iter().zip(self.value(*a)).map(|(g, x)| g / x).collect();
                    send(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    send(&mut grads, *a, ga);
                }
                Op::Reshape(a) => send(&mut grads, *a, g.clone()),
                Op::ConcatFlatten(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        send(&mut grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.nodes[a.0].requires_grad {
                        // dA = dC · Bᵀ
                        let vb = self.value(*b);
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * vb[p * n + j];
                                }
                                ga[i * k + p] = acc;
                            }
                        }
                        send(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = Aᵀ · dC
                        let va = self.value(*a);
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let x = va[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                let row = &mut gb[p * n..(p + 1) * n];
                                for (r, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                    *r += x * gv;
                                }
                            }
                        }
                        send(&mut grads, *b, gb);
                    }
                }
                Op::Mean { input, out_index, count } => {
                    let scale = 1.0 / *count as Real;
                    let ga = out_index.iter().map(|&o| g[o] * scale).collect();
                    send(&mut grads, *input, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    send(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SoftmaxCrossEntropy { logits, target, probs } => {
                    let mut ga: Vec<Real> = probs.iter().map(|p| p * g[0]).collect();
                    ga[*target] -= g[0];
                    send(&mut grads, *logits, ga);
                }
                Op::L2Normalize { input, norm } => {
                    // d v = (g - y (y·g)) / ‖v‖
                    let y = &node.value;
                    let dot: Real = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let ga = g.iter().zip(y).map(|(g, y)| (g - y * dot) / norm).collect();
                    send(&mut grads, *input, ga);
                }
                Op::Gather { input, indices } => {
                    let mut ga = vec![0.0; self.value(*input).len()];
                    for (gv, &i) in g.iter().zip(indices) {
                        ga[i] += gv;
                    }
                    send(&mut grads, *input, ga);
                }
                Op::AddBias { x, bias, cols } => {
                    let mut gb = vec![0.0; *cols];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % cols] += gv;
                    }
                    send(&mut grads, *x, g.clone());
                    send(&mut grads, *bias, gb);
                }
                Op::UnfoldTime { input, source } => {
                    let mut ga = vec![0.0; self.value(*input).len()];
                    for (gv, s) in g.iter().zip(source) {
                        if let Some(i) = s {
                            ga[*i] += gv;
                        }
                    }
                    send(&mut grads, *input, ga);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn l2_norm(v: &[Real]) -> Real {
    v.iter().map(|x| x * x).sum::<Real>().sqrt()
}

pub(crate) fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Real, b: Real, tol: Real) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_margin_is_smallest_relu_input() {
        let mut tape = Tape::new();
        assert_eq!(tape.relu_margin(), Real::INFINITY);
        let a = tape.constant(vec![3], vec![0.5, -0.02, 3.0]).unwrap();
        let b = tape.constant(vec![2], vec![-0.3, 0.1]).unwrap();
        tape.relu(a).unwrap();
        tape.relu(b).unwrap();
        tape.exp(b).unwrap();
        assert_eq!(tape.relu_margin(), 0.02);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_row() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn mean_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let m0 = tape.mean_over_axes(x, &[0]).unwrap();
        assert_eq!(tape.value(m0), &[3.0, 5.0]);
        assert_eq!(tape.shape(m0), &[2]);
        let m1 = tape.mean_over_axes(x, &[1]).unwrap();
        assert_eq!(tape.value(m1), &[2.0, 6.0]);
        let all = tape.mean_over_axes(x, &[0, 1]).unwrap();
        assert_eq!(tape.value(all), &[4.0]);
        assert!(tape.shape(all).is_empty());
    }

    #[test]
    fn mean_of_constant_spreads_gradient_uniformly() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![2, 3, 2], vec![2.5; 12]).unwrap();
        let m = tape.mean_over_axes(x, &[0, 1, 2]).unwrap();
        assert_eq!(tape.scalar(m), 2.5);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| close(v, 1.0 / 12.0, 1e-15)));
    }

    #[test]
    fn mean_rejects_bad_axes() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(tape.mean_over_axes(x, &[]).is_err());
        assert!(tape.mean_over_axes(x, &[2]).is_err());
        assert!(tape.mean_over_axes(x, &[1, 1]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let z = tape.variable(vec![10], vec![0.7; 10]).unwrap();
        let l = tape.softmax_cross_entropy(z, 3).unwrap();
        assert!(close(tape.scalar(l), (10.0 as Real).ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_saturated_is_finite_and_zero() {
        let mut tape = Tape::checked();
        let z = tape.variable(vec![2], vec![30.0, -30.0]).unwrap();
        let l = tape.softmax_cross_entropy(z, 0).unwrap();
        assert!(tape.scalar(l) >= 0.0 && tape.scalar(l) < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let z = tape.variable(vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(tape.softmax_cross_entropy(z, 3), Err(TensorError::Index { .. })));
        let one = tape.variable(vec![1], vec![0.0]).unwrap();
        assert!(tape.softmax_cross_entropy(one, 0).is_err());
    }

    #[test]
    fn exp_log_basics() {
        let mut tape = Tape::new();
        let z = tape.variable(vec![1], vec![0.0]).unwrap();
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.value(e), &[1.0]);
        let o = tape.variable(vec![1], vec![1.0]).unwrap();
        let l = tape.log(o).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
    }

    #[test]
    fn checked_log_rejects_non_positive() {
        let mut tape = Tape::checked();
        let x = tape.variable(vec![2], vec![1.0, 0.0]).unwrap();
        let err = tape.log(x).unwrap_err();
        assert!(matches!(err, TensorError::Domain { op: "log", .. }));
        // unchecked mode lets -inf through
        let mut loose = Tape::new();
        let x = loose.variable(vec![1], vec![0.0]).unwrap();
        let y = loose.log(x).unwrap();
        assert_eq!(loose.value(y)[0], Real::NEG_INFINITY);
    }

    #[test]
    fn checked_mode_rejects_non_finite_results() {
        let mut tape = Tape::checked();
        let x = tape.variable(vec![1], vec![1000.0]).unwrap();
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
        assert!(tape.constant(vec![1], vec![Real::NAN]).is_err());
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let mut tape = Tape::new();
        let data: Vec<Real> = (0..12).map(|v| v as Real).collect();
        let x = tape.variable(vec![3, 4], data.clone()).unwrap();
        let flat = tape.reshape(x, vec![12]).unwrap();
        assert_eq!(tape.value(flat), data.as_slice());
        assert!(tape.reshape(x, vec![5]).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let v = tape.variable(vec![2], vec![3.0, 4.0]).unwrap();
        let n = tape.l2_normalize(v).unwrap();
        assert!(close(tape.value(n)[0], 0.6, 1e-15) && close(tape.value(n)[1], 0.8, 1e-15));
        let again = tape.l2_normalize(n).unwrap();
        assert!(tape.value(again).iter().zip(tape.value(n)).all(|(a, b)| close(*a, *b, 1e-15)));
        let z = tape.variable(vec![2], vec![0.0, 1e-14]).unwrap();
        assert!(matches!(tape.l2_normalize(z), Err(TensorError::Degenerate { .. })));
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![], vec![1.7]).unwrap();
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let c = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unfold_time_same_padding() {
        let mut tape = Tape::new();
        // J=1, T=3, C=1 with values 1,2,3
        let x = tape.variable(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let u = tape.unfold_time(x, 3, 1).unwrap();
        assert_eq!(tape.shape(u), &[3, 3]);
        assert_eq!(tape.value(u), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
        let s = tape.unfold_time(x, 3, 2).unwrap();
        assert_eq!(tape.shape(s), &[2, 3]);
        assert_eq!(tape.value(s), &[0.0, 1.0, 2.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn fault_injection_flips_gradient_sign() {
        let mut tape = Tape::new().with_fault(Some(OpKind::Sum));
        let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[-1.0, -1.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
        assert_eq!(OpKind::from_name("nope"), None);
    }
}
