//! Reverse-mode automatic differentiation over a recorded tape of dense tensors.
//!
//! The tape is define-by-run: every forward computation appends nodes in
//! evaluation order, so operand ids are always smaller than their consumer's
//! id and a single reverse sweep over the ids is a valid topological order.
//! Values are dense, row-major `f64` tensors. Binary elementwise ops accept
//! equal shapes or a single-element operand, which is broadcast.

use crate::basis::BasisPoly;
use crate::error::{Error, Result};
use crate::special::{digamma, lgamma, sigmoid, softplus};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: vec![data.len()],
                rhs: shape,
            });
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            data,
            shape: vec![n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            data: vec![v],
            shape: vec![1],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            data: vec![v; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on a tape node.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    PowConst(f64),
    Exp,
    Log,
    Lgamma,
    Relu,
    Sin,
    Tanh,
    Softplus,
    /// `c · x`
    Scale(f64),
    /// `x + c`
    Offset(f64),
    Sum,
    Mean,
    /// `[m, k] × [k, n] → [m, n]`
    MatMul,
    SquareNorm,
    /// 2-D transpose.
    Transpose,
    /// `[.., n] → [.., n·k]`, each element repeated `k` times in place.
    RepeatInner(usize),
    /// `[m, n] → [m]`, mean over each row.
    RowMean,
    Reshape(Vec<usize>),
    /// Fused ReLU-KAN basis derivative `∂ʲR/∂xʲ` of the given order.
    /// Operands: `x [B, n]`, `s [n, K]`, `e [n, K]`; output `[B, n·K]`.
    Basis { order: u32, deriv: u32 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::PowConst(_) => "pow-const",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Lgamma => "lgamma",
            OpKind::Relu => "relu",
            OpKind::Sin => "sin",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MatMul => "matmul",
            OpKind::SquareNorm => "square-norm",
            OpKind::Transpose => "transpose",
            OpKind::RepeatInner(_) => "repeat-inner",
            OpKind::RowMean => "row-mean",
            OpKind::Reshape(_) => "reshape",
            OpKind::Basis { .. } => "basis",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Leaf => 0,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            OpKind::Basis { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    op: OpKind,
    operands: Vec<NodeId>,
    value: Tensor,
}

impl Node {
    pub fn op(&self) -> &OpKind {
        &self.op
    }

    pub fn operands(&self) -> &[NodeId] {
        &self.operands
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

macro_rules! unary {
    ($($name:ident => $kind:expr),* $(,)?) => {
        $(
            pub fn $name(&mut self, a: NodeId) -> Result<NodeId> {
                self.record($kind, &[a])
            }
        )*
    };
}

macro_rules! binary {
    ($($name:ident => $kind:expr),* $(,)?) => {
        $(
            pub fn $name(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
                self.record($kind, &[a, b])
            }
        )*
    };
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, Vec::new(), value)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&mut self, op: OpKind, operands: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            operands,
            value,
        });
        id
    }

    /// Records `op` applied to `operands`, evaluating the primal eagerly.
    pub fn record(&mut self, op: OpKind, operands: &[NodeId]) -> Result<NodeId> {
        if op == OpKind::Leaf || operands.len() != op.arity() {
            return Err(Error::Arity {
                op: op.name(),
                expected: op.arity(),
                got: operands.len(),
            });
        }
        for id in operands {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id.0));
            }
        }
        let value = self.forward(&op, operands)?;
        Ok(self.push(op, operands.to_vec(), value))
    }

    unary! {
        exp => OpKind::Exp,
        log => OpKind::Log,
        lgamma => OpKind::Lgamma,
        relu => OpKind::Relu,
        sin => OpKind::Sin,
        tanh => OpKind::Tanh,
        softplus => OpKind::Softplus,
        sum => OpKind::Sum,
        mean => OpKind::Mean,
        square_norm => OpKind::SquareNorm,
        transpose => OpKind::Transpose,
        row_mean => OpKind::RowMean,
    }

    binary! {
        add => OpKind::Add,
        sub => OpKind::Sub,
        mul => OpKind::Mul,
        div => OpKind::Div,
        matmul => OpKind::MatMul,
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.record(OpKind::PowConst(p), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.powf(a, 2.0)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(OpKind::Scale(c), &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(OpKind::Offset(c), &[a])
    }

    pub fn repeat_inner(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        self.record(OpKind::RepeatInner(k), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn basis(&mut self, x: NodeId, s: NodeId, e: NodeId, order: u32, deriv: u32) -> Result<NodeId> {
        self.record(OpKind::Basis { order, deriv }, &[x, s, e])
    }

    /// `max(a, c)` elementwise, written as `relu(a - c) + c`.
    pub fn floor_at(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shifted = self.offset(a, -c)?;
        let r = self.relu(shifted)?;
        self.offset(r, c)
    }

    fn forward(&self, op: &OpKind, ids: &[NodeId]) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[ids[i].0].value;
        let out = match op {
            OpKind::Leaf => unreachable!(),
            OpKind::Add => broadcast(op, v(0), v(1), |a, b| a + b)?,
            OpKind::Sub => broadcast(op, v(0), v(1), |a, b| a - b)?,
            OpKind::Mul => broadcast(op, v(0), v(1), |a, b| a * b)?,
            OpKind::Div => broadcast(op, v(0), v(1), |a, b| a / b)?,
            OpKind::PowConst(p) => {
                let p = *p;
                if p == 2.0 {
                    map(v(0), |x| x * x)
                } else {
                    map(v(0), |x| x.powf(p))
                }
            }
            OpKind::Exp => map(v(0), f64::exp),
            OpKind::Log => map(v(0), f64::ln),
            OpKind::Lgamma => map(v(0), lgamma),
            OpKind::Relu => map(v(0), |x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Sin => map(v(0), f64::sin),
            OpKind::Tanh => map(v(0), f64::tanh),
            OpKind::Softplus => map(v(0), softplus),
            OpKind::Scale(c) => {
                let c = *c;
                map(v(0), |x| c * x)
            }
            OpKind::Offset(c) => {
                let c = *c;
                map(v(0), |x| x + c)
            }
            OpKind::Sum => Tensor::scalar(v(0).data.iter().sum()),
            OpKind::Mean => {
                let a = v(0);
                if a.is_empty() {
                    return Err(Error::domain("mean of empty tensor"));
                }
                Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
            }
            OpKind::SquareNorm => Tensor::scalar(v(0).data.iter().map(|x| x * x).sum()),
            OpKind::MatMul => {
                let (a, b) = (v(0), v(1));
                let (m, k, n) = matmul_dims(a, b)?;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let arow = &a.data[i * k..(i + 1) * k];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (p, &av) in arow.iter().enumerate() {
                        let brow = &b.data[p * n..(p + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
                Tensor {
                    data: out,
                    shape: vec![m, n],
                }
            }
            OpKind::Transpose => {
                let a = v(0);
                let (m, n) = dims2(op, a)?;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = a.data[i * n + j];
                    }
                }
                Tensor {
                    data: out,
                    shape: vec![n, m],
                }
            }
            OpKind::RepeatInner(k) => {
                let a = v(0);
                let k = *k;
                let mut data = Vec::with_capacity(a.len() * k);
                for &x in &a.data {
                    data.extend(std::iter::repeat_n(x, k));
                }
                let mut shape = a.shape.clone();
                *shape.last_mut().expect("non-empty shape") *= k;
                Tensor { data, shape }
            }
            OpKind::RowMean => {
                let a = v(0);
                let (m, n) = dims2(op, a)?;
                let data = (0..m)
                    .map(|i| a.data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                Tensor {
                    data,
                    shape: vec![m],
                }
            }
            OpKind::Reshape(shape) => {
                let a = v(0);
                if shape.iter().product::<usize>() != a.len() {
                    return Err(Error::ShapeMismatch {
                        op: "reshape",
                        lhs: a.shape.clone(),
                        rhs: shape.clone(),
                    });
                }
                Tensor {
                    data: a.data.clone(),
                    shape: shape.clone(),
                }
            }
            OpKind::Basis { order, deriv } => {
                let (x, s, e) = (v(0), v(1), v(2));
                let (b, n, k) = basis_dims(x, s, e)?;
                let poly = BasisPoly::new(*order);
                let d = *deriv as usize;
                let mut out = vec![0.0; b * n * k];
                for bi in 0..b {
                    for p in 0..n {
                        let xv = x.data[bi * n + p];
                        let row = &mut out[(bi * n + p) * k..(bi * n + p + 1) * k];
                        for (i, o) in row.iter_mut().enumerate() {
                            let (sv, ev) = (s.data[p * k + i], e.data[p * k + i]);
                            *o = poly.derivative_at(xv, sv, ev, d);
                        }
                    }
                }
                Tensor {
                    data: out,
                    shape: vec![b, n * k],
                }
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `root`. Every node reachable from the root
    /// receives an adjoint; all others report zero.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = &self
            .nodes
            .get(root.0)
            .ok_or(Error::UnknownNode(root.0))?
            .value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if node.op != OpKind::Leaf {
                self.propagate(node, &g, &mut adj);
            }
            adj[id] = Some(g);
        }
        let shapes = self.nodes[..=root.0].iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { adj, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let ids = &node.operands;
        let val = |i: usize| &self.nodes[ids[i].0].value;
        let out = &node.value;
        match &node.op {
            OpKind::Leaf => {}
            OpKind::Add => {
                accumulate_broadcast(adj, ids[0], val(0).len(), g, |_, gi| gi);
                accumulate_broadcast(adj, ids[1], val(1).len(), g, |_, gi| gi);
            }
            OpKind::Sub => {
                accumulate_broadcast(adj, ids[0], val(0).len(), g, |_, gi| gi);
                accumulate_broadcast(adj, ids[1], val(1).len(), g, |_, gi| -gi);
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                accumulate_broadcast(adj, ids[0], a.len(), g, |j, gi| gi * at(b, j));
                accumulate_broadcast(adj, ids[1], b.len(), g, |j, gi| gi * at(a, j));
            }
            OpKind::Div => {
                let (a, b) = (val(0), val(1));
                accumulate_broadcast(adj, ids[0], a.len(), g, |j, gi| gi / at(b, j));
                accumulate_broadcast(adj, ids[1], b.len(), g, |j, gi| {
                    let bv = at(b, j);
                    -gi * at(a, j) / (bv * bv)
                });
            }
            OpKind::PowConst(p) => {
                let p = *p;
                let a = val(0);
                if p == 2.0 {
                    accumulate_map(adj, ids[0], g, |j, gi| gi * 2.0 * a.data[j]);
                } else {
                    accumulate_map(adj, ids[0], g, |j, gi| gi * p * a.data[j].powf(p - 1.0));
                }
            }
            OpKind::Exp => accumulate_map(adj, ids[0], g, |j, gi| gi * out.data[j]),
            OpKind::Log => {
                let a = val(0);
                accumulate_map(adj, ids[0], g, |j, gi| gi / a.data[j]);
            }
            OpKind::Lgamma => {
                let a = val(0);
                accumulate_map(adj, ids[0], g, |j, gi| gi * digamma(a.data[j]));
            }
            OpKind::Relu => {
                let a = val(0);
                accumulate_map(adj, ids[0], g, |j, gi| if a.data[j] > 0.0 { gi } else { 0.0 });
            }
            OpKind::Sin => {
                let a = val(0);
                accumulate_map(adj, ids[0], g, |j, gi| gi * a.data[j].cos());
            }
            OpKind::Tanh => accumulate_map(adj, ids[0], g, |j, gi| {
                let t = out.data[j];
                gi * (1.0 - t * t)
            }),
            OpKind::Softplus => {
                let a = val(0);
                accumulate_map(adj, ids[0], g, |j, gi| gi * sigmoid(a.data[j]));
            }
            OpKind::Scale(c) => {
                let c = *c;
                accumulate_map(adj, ids[0], g, |_, gi| gi * c);
            }
            OpKind::Offset(_) | OpKind::Reshape(_) => accumulate_map(adj, ids[0], g, |_, gi| gi),
            OpKind::Sum => {
                let n = val(0).len();
                let g0 = g[0];
                add_into(adj, ids[0], n, |_| g0);
            }
            OpKind::Mean => {
                let n = val(0).len();
                let g0 = g[0] / n as f64;
                add_into(adj, ids[0], n, |_| g0);
            }
            OpKind::SquareNorm => {
                let a = val(0);
                let g0 = g[0];
                add_into(adj, ids[0], a.len(), |j| 2.0 * g0 * a.data[j]);
            }
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                // dA = G Bᵀ
                let da = slot(adj, ids[0], m * k);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data[p * n + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
                // dB = Aᵀ G
                let db = slot(adj, ids[1], k * n);
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
            }
            OpKind::Transpose => {
                let a = val(0);
                let (m, n) = (a.shape[0], a.shape[1]);
                let da = slot(adj, ids[0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
            OpKind::RepeatInner(k) => {
                let k = *k;
                let n = val(0).len();
                let da = slot(adj, ids[0], n);
                for (j, d) in da.iter_mut().enumerate() {
                    *d += g[j * k..(j + 1) * k].iter().sum::<f64>();
                }
            }
            OpKind::RowMean => {
                let a = val(0);
                let (m, n) = (a.shape[0], a.shape[1]);
                let inv = 1.0 / n as f64;
                add_into(adj, ids[0], m * n, |j| g[j / n] * inv);
            }
            OpKind::Basis { order, deriv } => {
                let (x, s, e) = (val(0), val(1), val(2));
                let (b, n, k) = (x.shape[0], x.shape[1], s.shape[1]);
                let poly = BasisPoly::new(*order);
                let d = *deriv as usize;
                let mut gx = vec![0.0; b * n];
                let mut gs = vec![0.0; n * k];
                let mut ge = vec![0.0; n * k];
                for bi in 0..b {
                    for p in 0..n {
                        let xv = x.data[bi * n + p];
                        let base = (bi * n + p) * k;
                        let mut acc_x = 0.0;
                        for i in 0..k {
                            let gi = g[base + i];
                            if gi == 0.0 {
                                continue;
                            }
                            let idx = p * k + i;
                            let (dx, ds, de) = poly.partials(xv, s.data[idx], e.data[idx], d);
                            acc_x += gi * dx;
                            gs[idx] += gi * ds;
                            ge[idx] += gi * de;
                        }
                        gx[bi * n + p] += acc_x;
                    }
                }
                add_vec(adj, ids[0], &gx);
                add_vec(adj, ids[1], &gs);
                add_vec(adj, ids[2], &ge);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` if the node does not influence the root.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.adj.get(id.0).and_then(|a| a.as_deref())
    }

    /// Adjoint of `id` as a tensor; zeros for unreachable nodes.
    pub fn wrt(&self, id: NodeId, tape: &Tape) -> Tensor {
        match self.get(id) {
            Some(a) => Tensor {
                data: a.to_vec(),
                shape: self.shapes[id.0].clone(),
            },
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }

    /// Adjoint data for `id`, zero-filled to `len` when unreachable.
    pub fn wrt_data(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn at(t: &Tensor, j: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[j]
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        data: a.data.iter().map(|&x| f(x)).collect(),
        shape: a.shape.clone(),
    }
}

fn broadcast(op: &OpKind, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        Ok(Tensor {
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            shape: a.shape.clone(),
        })
    } else if b.len() == 1 {
        let y = b.data[0];
        Ok(map(a, |x| f(x, y)))
    } else if a.len() == 1 {
        let x = a.data[0];
        Ok(map(b, |y| f(x, y)))
    } else {
        Err(Error::ShapeMismatch {
            op: op.name(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn dims2(op: &OpKind, a: &Tensor) -> Result<(usize, usize)> {
    if a.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: op.name(),
            lhs: a.shape.clone(),
            rhs: vec![0, 0],
        });
    }
    Ok((a.shape[0], a.shape[1]))
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

fn basis_dims(x: &Tensor, s: &Tensor, e: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape.len() != 2 || s.shape.len() != 2 || x.shape[1] != s.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "basis",
            lhs: x.shape.clone(),
            rhs: s.shape.clone(),
        });
    }
    if s.shape != e.shape {
        return Err(Error::ShapeMismatch {
            op: "basis",
            lhs: s.shape.clone(),
            rhs: e.shape.clone(),
        });
    }
    Ok((x.shape[0], x.shape[1], s.shape[1]))
}

fn slot(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    adj[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl Fn(usize) -> f64) {
    for (j, d) in slot(adj, id, len).iter_mut().enumerate() {
        *d += f(j);
    }
}

fn add_vec(adj: &mut [Option<Vec<f64>>], id: NodeId, v: &[f64]) {
    for (d, x) in slot(adj, id, v.len()).iter_mut().zip(v) {
        *d += x;
    }
}

/// Same-shape elementwise adjoint accumulation.
fn accumulate_map(adj: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (j, d) in slot(adj, id, g.len()).iter_mut().enumerate() {
        *d += f(j, g[j]);
    }
}

/// Elementwise accumulation where the operand may have been broadcast from a
/// single element, in which case contributions are summed.
fn accumulate_broadcast(
    adj: &mut [Option<Vec<f64>>],
    id: NodeId,
    operand_len: usize,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if operand_len == g.len() {
        accumulate_map(adj, id, g, f);
    } else {
        let total: f64 = g.iter().enumerate().map(|(j, &gi)| f(j, gi)).sum();
        slot(adj, id, 1)[0] += total;
    }
}

/// Largest relative discrepancy between reverse-mode gradients and central
/// differences, `|analytic − fd| / max(1, |analytic|)`, over every element
/// of every parameter. NaN anywhere yields NaN.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &ids)?;
        Ok((tape, ids, root))
    };
    let Ok((tape, ids, root)) = eval(params) else {
        return f64::NAN;
    };
    let Ok(grads) = tape.backward(root) else {
        return f64::NAN;
    };
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.wrt_data(*id, params[pi].len());
        for j in 0..params[pi].len() {
            let orig = params[pi].data[j];
            work[pi].data[j] = orig + h;
            let plus = eval(&work).map(|(t, _, r)| t.scalar_value(r));
            work[pi].data[j] = orig - h;
            let minus = eval(&work).map(|(t, _, r)| t.scalar_value(r));
            work[pi].data[j] = orig;
            let (Ok(plus), Ok(minus)) = (plus, minus) else {
                return f64::NAN;
            };
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic[j] - fd).abs() / analytic[j].abs().max(1.0);
            if err.is_nan() {
                return f64::NAN;
            }
            worst = worst.max(err);
        }
    }
    worst
}
