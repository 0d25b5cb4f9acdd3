//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order: a node can only be
//! built from nodes that exist. [`Tape::backward`] walks that order in
//! reverse exactly once and accumulates gradients into every node that
//! requires them.
//!
//! Broadcasting is limited to scalar-with-tensor. Convolutions use the
//! cross-correlation convention (the kernel is not flipped).

use std::cell::{Cell, Ref, RefCell};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },
    #[error("empty reduction over axis {axis}")]
    EmptyReduction { axis: usize },
    #[error("invalid axis {axis} for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    NoTape,
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Dense row-major array. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(mismatch("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Elementwise operation kinds. Binary kinds take a second operand of the
/// same shape or a single-element operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Square,
    /// Huber-style smooth L1 with unit transition point.
    SmoothL1,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Neg => "neg",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Square => "square",
            Self::SmoothL1 => "smooth_l1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op {
    Leaf,
    Elementwise {
        kind: Elementwise,
        a: usize,
        b: Option<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelBias {
        x: usize,
        bias: usize,
        plane: usize,
    },
    Softmax {
        x: usize,
        layout: AxisLayout,
        log: bool,
    },
    Reduce {
        kind: ReduceKind,
        x: usize,
        out_index: Vec<usize>,
        counts: Vec<usize>,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    /// Calls `f` with the flat indices of every lane along the axis.
    fn for_each_lane(&self, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let inner = self.inner;
                let mut it = (0..self.len).map(move |l| base + l * inner);
                f(&mut it);
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Confined to a single
/// thread; build a fresh tape per pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            strict: false,
        }
    }

    /// A tape whose `log` and `div` reject out-of-domain inputs instead of
    /// producing non-finite values.
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn owns(&self, v: Var<'_>) -> Result<usize> {
        if std::ptr::eq(self, v.tape) {
            Ok(v.id)
        } else {
            Err(AutodiffError::NoTape)
        }
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let root = self.owns(loss)?;
        if self.grads.borrow().is_some() {
            return Err(AutodiffError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(AutodiffError::NotScalar(nodes[root].value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Gradient accumulated by the last backward pass. `None` before backward
    /// or for nodes that do not require gradient; zeros for tracked nodes the
    /// loss does not depend on.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let id = self.owns(v).ok()?;
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        if !node.requires_grad {
            return None;
        }
        let data = grads[id]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor {
            shape: node.value.shape.clone(),
            data,
        })
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Elementwise { kind, .. } => kind.name(),
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Softmax { log: false, .. } => "softmax",
            Op::Softmax { log: true, .. } => "log_softmax",
            Op::Reduce { kind: ReduceKind::Sum, .. } => "sum",
            Op::Reduce { kind: ReduceKind::Mean, .. } => "mean",
            Op::Reduce { kind: ReduceKind::Max, .. } => "max",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
        }
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Verification hook: while set, the backward rule of the named operation
/// returns 1.5 times the correct gradient on the current thread. Exists so
/// that the gradient-check suite can be shown to catch a broken rule.
#[doc(hidden)]
pub fn inject_backward_fault(op: Option<&'static str>) {
    BACKWARD_FAULT.with(|f| f.set(op));
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let scaled: Vec<f64>;
    let g = if BACKWARD_FAULT.with(Cell::get) == Some(node.op.name()) {
        scaled = g.iter().map(|v| 1.5 * v).collect();
        &scaled[..]
    } else {
        g
    };
    match &node.op {
        Op::Leaf => {}
        Op::Elementwise { kind, a, b } => backprop_elementwise(nodes, grads, node, *kind, *a, *b, g),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let bv = nodes[*b].value.data.as_slice();
            let av = nodes[*a].value.data.as_slice();
            if let Some(da) = slot(grads, nodes, *a) {
                // dA += dC . B^T
                gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), da, (k as isize, 1));
            }
            if let Some(db) = slot(grads, nodes, *b) {
                // dB += A^T . dC
                gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), db, (n as isize, 1));
            }
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        } => {
            let (rows, ncols) = (geom.rows(), geom.cols());
            if let Some(dk) = slot(grads, nodes, *kernel) {
                // dK += dOut . cols^T
                gemm(
                    geom.cout,
                    ncols,
                    rows,
                    g,
                    (ncols as isize, 1),
                    cols,
                    (1, ncols as isize),
                    dk,
                    (rows as isize, 1),
                );
            }
            if nodes[*input].requires_grad {
                let kv = nodes[*kernel].value.data.as_slice();
                let mut dcols = vec![0.0; rows * ncols];
                gemm(
                    rows,
                    geom.cout,
                    ncols,
                    kv,
                    (1, rows as isize),
                    g,
                    (ncols as isize, 1),
                    &mut dcols,
                    (ncols as isize, 1),
                );
                if let Some(dx) = slot(grads, nodes, *input) {
                    col2im(geom, &dcols, dx);
                }
            }
        }
        Op::ChannelBias { x, bias, plane } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for (c, chunk) in g.chunks(*plane).enumerate() {
                    db[c] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Softmax { x, layout, log } => {
            let y = node.value.data.as_slice();
            if let Some(dx) = slot(grads, nodes, *x) {
                layout.for_each_lane(|lane| {
                    let idx: Vec<usize> = lane.collect();
                    if *log {
                        let s: f64 = idx.iter().map(|&i| g[i]).sum();
                        for &i in &idx {
                            dx[i] += g[i] - y[i].exp() * s;
                        }
                    } else {
                        let s: f64 = idx.iter().map(|&i| g[i] * y[i]).sum();
                        for &i in &idx {
                            dx[i] += y[i] * (g[i] - s);
                        }
                    }
                });
            }
        }
        Op::Reduce {
            kind,
            x,
            out_index,
            counts,
            argmax,
        } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                match kind {
                    ReduceKind::Sum => {
                        for (i, &o) in out_index.iter().enumerate() {
                            dx[i] += g[o];
                        }
                    }
                    ReduceKind::Mean => {
                        for (i, &o) in out_index.iter().enumerate() {
                            dx[i] += g[o] / counts[o] as f64;
                        }
                    }
                    ReduceKind::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            dx[i] += g[o];
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Gather { x, indices } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (o, &i) in indices.iter().enumerate() {
                    dx[i] += g[o];
                }
            }
        }
    }
}

fn backprop_elementwise(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    node: &Node,
    kind: Elementwise,
    a: usize,
    b: Option<usize>,
    g: &[f64],
) {
    let av = nodes[a].value.data.as_slice();
    let y = node.value.data.as_slice();
    let Some(b) = b else {
        if let Some(da) = slot(grads, nodes, a) {
            for i in 0..g.len() {
                let x = av[i];
                da[i] += g[i]
                    * match kind {
                        Elementwise::Neg => -1.0,
                        Elementwise::Exp => y[i],
                        Elementwise::Log => 1.0 / x,
                        Elementwise::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Elementwise::Sigmoid => y[i] * (1.0 - y[i]),
                        Elementwise::Square => 2.0 * x,
                        Elementwise::SmoothL1 => x.clamp(-1.0, 1.0),
                        _ => unreachable!("binary kind without second operand"),
                    };
            }
        }
        return;
    };
    let bv = nodes[b].value.data.as_slice();
    let a_scalar = av.len() == 1 && g.len() != 1;
    let b_scalar = bv.len() == 1 && g.len() != 1;
    let at = |i: usize| if a_scalar { av[0] } else { av[i] };
    let bt = |i: usize| if b_scalar { bv[0] } else { bv[i] };
    let (ga, gb): (Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize) -> f64>) = match kind {
        Elementwise::Add => (Box::new(|i| g[i]), Box::new(|i| g[i])),
        Elementwise::Sub => (Box::new(|i| g[i]), Box::new(|i| -g[i])),
        Elementwise::Mul => (Box::new(|i| g[i] * bt(i)), Box::new(|i| g[i] * at(i))),
        Elementwise::Div => (
            Box::new(|i| g[i] / bt(i)),
            Box::new(|i| -g[i] * at(i) / (bt(i) * bt(i))),
        ),
        _ => unreachable!("unary kind with second operand"),
    };
    if let Some(da) = slot(grads, nodes, a) {
        for i in 0..g.len() {
            da[if a_scalar { 0 } else { i }] += ga(i);
        }
    }
    if let Some(db) = slot(grads, nodes, b) {
        for i in 0..g.len() {
            db[if b_scalar { 0 } else { i }] += gb(i);
        }
    }
}

/// `c += a . b` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every stride pair describes a dense row- or column-major view
    // whose extent was validated against the slice lengths by the caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn im2col(geom: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let ncols = geom.cols();
    let mut cols = vec![0.0; geom.rows() * ncols];
    for c in 0..geom.cin {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let src = &x[(c * geom.h + iy as usize) * geom.w..][..geom.w];
                    for ox in 0..geom.ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < geom.w as isize {
                            dst[oy * geom.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(geom: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ncols = geom.cols();
    for c in 0..geom.cin {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * geom.h + iy as usize) * geom.w..][..geom.w];
                    for ox in 0..geom.ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < geom.w as isize {
                            dst[ix as usize] += src[oy * geom.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the node's value. Do not hold it across operations that
    /// record new nodes.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    /// Off-tape copy: same value, no gradient flows back through it.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    pub fn elementwise(self, kind: Elementwise, other: Option<Var<'t>>) -> Result<Var<'t>> {
        let tape = self.tape;
        tape.owns(self)?;
        if kind.is_binary() {
            let Some(b) = other else {
                return Err(AutodiffError::DomainError {
                    op: "elementwise",
                    detail: format!("{kind:?} needs two operands"),
                });
            };
            tape.owns(b)?;
            let value = {
                let nodes = tape.nodes.borrow();
                let (a, bt) = (&nodes[self.id].value, &nodes[b.id].value);
                binary_forward(kind, a, bt, tape.strict)?
            };
            let rg = self.rg() || b.rg();
            Ok(tape.push(
                value,
                Op::Elementwise {
                    kind,
                    a: self.id,
                    b: Some(b.id),
                },
                rg,
            ))
        } else {
            let value = {
                let nodes = tape.nodes.borrow();
                unary_forward(kind, &nodes[self.id].value, tape.strict)?
            };
            let rg = self.rg();
            Ok(tape.push(
                value,
                Op::Elementwise {
                    kind,
                    a: self.id,
                    b: None,
                },
                rg,
            ))
        }
    }

    pub fn add(self, b: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Add, Some(b))
    }
    pub fn sub(self, b: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Sub, Some(b))
    }
    pub fn mul(self, b: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Mul, Some(b))
    }
    pub fn div(self, b: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Div, Some(b))
    }
    pub fn neg(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Neg, None)
    }
    pub fn exp(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Exp, None)
    }
    pub fn log(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Log, None)
    }
    pub fn relu(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Relu, None)
    }
    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Sigmoid, None)
    }
    pub fn square(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::Square, None)
    }
    pub fn smooth_l1(self) -> Result<Var<'t>> {
        self.elementwise(Elementwise::SmoothL1, None)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let s = self.tape.scalar(factor);
        self.mul(s)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, b: Var<'t>) -> Result<Var<'t>> {
        let tape = self.tape;
        tape.owns(b)?;
        let (value, m, k, n) = {
            let nodes = tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
                return Err(mismatch("matmul", &av.shape, &bv.shape));
            }
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut c = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                &av.data,
                (k as isize, 1),
                &bv.data,
                (n as isize, 1),
                &mut c,
                (n as isize, 1),
            );
            (Tensor { shape: vec![m, n], data: c }, m, k, n)
        };
        let rg = self.rg() || b.rg();
        Ok(tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: b.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Cross-correlation of a `[cin, h, w]` input with a `[cout, cin, kh, kw]`
    /// kernel. Output extent is `floor((h + 2*padding - kh) / stride) + 1`.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let tape = self.tape;
        tape.owns(kernel)?;
        let rg = self.rg() || kernel.rg();
        let (value, geom, cols) = {
            let nodes = tape.nodes.borrow();
            let (xv, kv) = (&nodes[self.id].value, &nodes[kernel.id].value);
            if xv.rank() != 3 || kv.rank() != 4 || xv.shape[0] != kv.shape[1] {
                return Err(mismatch("conv2d", &xv.shape, &kv.shape));
            }
            let (cin, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
            let (cout, kh, kw) = (kv.shape[0], kv.shape[2], kv.shape[3]);
            if kh % 2 == 0 || kw % 2 == 0 || stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw
            {
                return Err(mismatch("conv2d", &xv.shape, &kv.shape));
            }
            let geom = ConvGeom {
                cin,
                h,
                w,
                cout,
                kh,
                kw,
                stride,
                pad: padding,
                oh: (h + 2 * padding - kh) / stride + 1,
                ow: (w + 2 * padding - kw) / stride + 1,
            };
            let cols = im2col(&geom, &xv.data);
            let mut out = vec![0.0; cout * geom.cols()];
            gemm(
                cout,
                geom.rows(),
                geom.cols(),
                &kv.data,
                (geom.rows() as isize, 1),
                &cols,
                (geom.cols() as isize, 1),
                &mut out,
                (geom.cols() as isize, 1),
            );
            let value = Tensor {
                shape: vec![cout, geom.oh, geom.ow],
                data: out,
            };
            // Columns are only needed for the kernel gradient.
            let keep = if kernel.rg() { cols } else { Vec::new() };
            (value, geom, keep)
        };
        Ok(tape.push(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[c, ...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let tape = self.tape;
        tape.owns(bias)?;
        let (value, plane) = {
            let nodes = tape.nodes.borrow();
            let (xv, bv) = (&nodes[self.id].value, &nodes[bias.id].value);
            if xv.rank() < 1 || bv.rank() != 1 || bv.shape[0] != xv.shape[0] {
                return Err(mismatch("add_channel_bias", &xv.shape, &bv.shape));
            }
            let plane = xv.numel() / xv.shape[0].max(1);
            let mut data = xv.data.clone();
            for (c, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv.data[c]);
            }
            (
                Tensor {
                    shape: xv.shape.clone(),
                    data,
                },
                plane,
            )
        };
        let rg = self.rg() || bias.rg();
        Ok(tape.push(
            value,
            Op::ChannelBias {
                x: self.id,
                bias: bias.id,
                plane,
            },
            rg,
        ))
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let tape = self.tape;
        let (value, layout) = {
            let nodes = tape.nodes.borrow();
            let xv = &nodes[self.id].value;
            let layout = AxisLayout::new(&xv.shape, axis)?;
            let mut out = vec![0.0; xv.numel()];
            layout.for_each_lane(|lane| {
                let idx: Vec<usize> = lane.collect();
                let mx = idx.iter().map(|&i| xv.data[i]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = idx.iter().map(|&i| (xv.data[i] - mx).exp()).sum();
                let lz = z.ln();
                for &i in &idx {
                    let shifted = xv.data[i] - mx;
                    out[i] = if log { shifted - lz } else { shifted.exp() / z };
                }
            });
            (
                Tensor {
                    shape: xv.shape.clone(),
                    data: out,
                },
                layout,
            )
        };
        let rg = self.rg();
        Ok(tape.push(
            value,
            Op::Softmax {
                x: self.id,
                layout,
                log,
            },
            rg,
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    /// Reduces over `axes`, dropping them from the shape. Reducing every axis
    /// yields a rank-0 scalar.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'t>> {
        let tape = self.tape;
        let (value, out_index, counts, argmax) = {
            let nodes = tape.nodes.borrow();
            let xv = &nodes[self.id].value;
            let rank = xv.rank();
            let mut reduced = vec![false; rank];
            for &a in axes {
                if a >= rank || reduced[a] {
                    return Err(AutodiffError::InvalidAxis { axis: a, rank });
                }
                reduced[a] = true;
            }
            for &a in axes {
                if xv.shape[a] == 0 {
                    return Err(AutodiffError::EmptyReduction { axis: a });
                }
            }
            let out_shape: Vec<usize> = (0..rank)
                .filter(|&d| !reduced[d])
                .map(|d| xv.shape[d])
                .collect();
            let out_n: usize = out_shape.iter().product();
            // Output strides over the kept axes, indexed by input axis.
            let mut out_stride = vec![0usize; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                if !reduced[d] {
                    out_stride[d] = acc;
                    acc *= xv.shape[d];
                }
            }
            let mut out_index = Vec::with_capacity(xv.numel());
            let mut counter = vec![0usize; rank];
            for _ in 0..xv.numel() {
                out_index.push(counter.iter().zip(&out_stride).map(|(c, s)| c * s).sum());
                for d in (0..rank).rev() {
                    counter[d] += 1;
                    if counter[d] < xv.shape[d] {
                        break;
                    }
                    counter[d] = 0;
                }
            }
            let mut counts = vec![0usize; out_n];
            out_index.iter().for_each(|&o| counts[o] += 1);
            let mut data = match kind {
                ReduceKind::Max => vec![f64::NEG_INFINITY; out_n],
                _ => vec![0.0; out_n],
            };
            let mut argmax = Vec::new();
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    for (i, &o) in out_index.iter().enumerate() {
                        data[o] += xv.data[i];
                    }
                    if kind == ReduceKind::Mean {
                        data.iter_mut().zip(&counts).for_each(|(d, &c)| *d /= c as f64);
                    }
                }
                ReduceKind::Max => {
                    argmax = vec![usize::MAX; out_n];
                    for (i, &o) in out_index.iter().enumerate() {
                        if argmax[o] == usize::MAX || xv.data[i] > data[o] {
                            data[o] = xv.data[i];
                            argmax[o] = i;
                        }
                    }
                }
            }
            (
                Tensor {
                    shape: out_shape,
                    data,
                },
                out_index,
                counts,
                argmax,
            )
        };
        let rg = self.rg();
        Ok(tape.push(
            value,
            Op::Reduce {
                kind,
                x: self.id,
                out_index,
                counts,
                argmax,
            },
            rg,
        ))
    }

    fn all_axes(&self) -> Vec<usize> {
        (0..self.value_ref().rank()).collect()
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let axes = self.all_axes();
        self.reduce(ReduceKind::Sum, &axes)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let axes = self.all_axes();
        self.reduce(ReduceKind::Mean, &axes)
    }

    pub fn max(self) -> Result<Var<'t>> {
        let axes = self.all_axes();
        self.reduce(ReduceKind::Max, &axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let rg = self.rg();
        Ok(self.tape.push(value, Op::Reshape { x: self.id }, rg))
    }

    /// `out.flat[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(self, indices: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let xv = self.value_ref();
            let n: usize = shape.iter().product();
            if n != indices.len() {
                return Err(mismatch("gather", shape, &[indices.len()]));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= xv.numel()) {
                return Err(mismatch("gather", &xv.shape, &[bad]));
            }
            Tensor {
                shape: shape.to_vec(),
                data: indices.iter().map(|&i| xv.data[i]).collect(),
            }
        };
        let rg = self.rg();
        Ok(self.tape.push(
            value,
            Op::Gather {
                x: self.id,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape == b.shape {
        Ok(a.shape.clone())
    } else if b.numel() == 1 {
        Ok(a.shape.clone())
    } else if a.numel() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(mismatch(op, &a.shape, &b.shape))
    }
}

fn binary_forward(kind: Elementwise, a: &Tensor, b: &Tensor, strict: bool) -> Result<Tensor> {
    let shape = broadcast_shape("elementwise", a, b)?;
    let n: usize = shape.iter().product();
    let at = |i: usize| if a.numel() == 1 { a.data[0] } else { a.data[i] };
    let bt = |i: usize| if b.numel() == 1 { b.data[0] } else { b.data[i] };
    if strict && kind == Elementwise::Div && b.data.contains(&0.0) {
        return Err(AutodiffError::DomainError {
            op: "div",
            detail: "division by zero".into(),
        });
    }
    let data = (0..n)
        .map(|i| match kind {
            Elementwise::Add => at(i) + bt(i),
            Elementwise::Sub => at(i) - bt(i),
            Elementwise::Mul => at(i) * bt(i),
            Elementwise::Div => at(i) / bt(i),
            _ => unreachable!(),
        })
        .collect();
    Ok(Tensor { shape, data })
}

fn unary_forward(kind: Elementwise, x: &Tensor, strict: bool) -> Result<Tensor> {
    if strict && kind == Elementwise::Log {
        if let Some(v) = x.data.iter().find(|&&v| v <= 0.0) {
            return Err(AutodiffError::DomainError {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
    }
    Ok(x.map(|v| match kind {
        Elementwise::Neg => -v,
        Elementwise::Exp => v.exp(),
        Elementwise::Log => v.ln(),
        // NaN passes through so corrupted inputs surface in the loss.
        Elementwise::Relu => if v > 0.0 || v.is_nan() { v } else { 0.0 },
        Elementwise::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Elementwise::Square => v * v,
        Elementwise::SmoothL1 => {
            let a = v.abs();
            if a < 1.0 {
                0.5 * v * v
            } else {
                a - 0.5
            }
        }
        _ => unreachable!(),
    }))
}

/// Largest relative disagreement between the taped gradient of `f` and a
/// central finite difference, normalized by `max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; every coordinate of every
/// input is probed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_subset(f, xs, h, |_, _| true)
}

/// [`grad_check_many`] restricted to the coordinates `(input, index)` for
/// which `probe` returns true.
pub fn grad_check_subset<F, P>(f: F, xs: &[Tensor], h: f64, probe: P) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    P: Fn(usize, usize) -> bool,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("param has gradient"))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        Ok(f(&t, &vs)?.item())
    };

    let mut worst = 0.0f64;
    let mut moved = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in (0..x.numel()).filter(|&i| probe(which, i)) {
            let orig = x.data[i];
            moved[which].data[i] = orig + h;
            let up = eval(&moved)?;
            moved[which].data[i] = orig - h;
            let down = eval(&moved)?;
            moved[which].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[which].data[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
