//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive application in creation order, so the
//! node list is topologically sorted by construction. Tapes are cheap and are
//! rebuilt for every training step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside `log` so that exact zeros stay finite.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis of a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows, producing `1 x cols`.
    Rows,
    /// Collapse columns, producing `rows x 1`.
    Cols,
}

/// How the right operand of a binary op is expanded to the left shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `1 x m` against `n x m`.
    Row,
    /// `n x 1` against `n x m`.
    Col,
    /// a single value against anything.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Binary(BinaryKind, Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    MeanAxis(Var, Axis),
    Concat(Vec<Var>, Axis),
    RowSoftmax(Var),
    RowL2Norm(Var),
    StopGradient,
    StraightThrough(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar output with respect to the tape's leaves.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

/// A recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
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

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(v.0))
    }

    /// Records a trainable leaf. Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(Op::Leaf, value, "leaf")?;
        self.leaves.push(v);
        Ok(v)
    }

    /// Records a constant input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value, "constant")
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        let bc = broadcast_kind(av, bv).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let out = zip_broadcast(av, bv, bc, f);
        self.push(Op::Binary(kind, a, b, bc), out, name)
    }

    /// `a + b`; `b` may be a row vector, a column vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.check(a)?.map(|x| x * k);
        self.push(Op::Scale(a, k), out, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.check(a)?.map(|x| x + k);
        self.push(Op::AddScalar(a), out, "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = matmul(av, bv);
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(|x| x.max(0.0));
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(f64::exp);
        self.push(Op::Exp(a), out, "exp")
    }

    /// `log(max(x, LOG_EPS))` for `x >= 0`; negative inputs are an error.
    /// Values at or above the floor are exact, so `log(1) == 0`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        if let Some(&neg) = av.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::LogOfNegative(neg));
        }
        let out = av.map(|x| x.max(LOG_EPS).ln());
        self.push(Op::Log(a), out, "log")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        if av.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let av = self.require_matrix(a, "sum_axis")?;
        let out = reduce_axis(av, axis);
        self.push(Op::SumAxis(a, axis), out, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let av = self.require_matrix(a, "mean_axis")?;
        let n = match axis {
            Axis::Rows => av.rows(),
            Axis::Cols => av.cols(),
        };
        if n == 0 {
            return Err(Error::Empty("mean_axis input"));
        }
        let out = reduce_axis(av, axis).map(|x| x / n as f64);
        self.push(Op::MeanAxis(a, axis), out, "mean_axis")
    }

    /// Concatenates matrices along rows (`Axis::Rows`) or columns.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.require_matrix(p, "concat")?.clone(),
            None => return Err(Error::Empty("concat input")),
        };
        let mut tensors = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.require_matrix(p, "concat")?;
            let ok = match axis {
                Axis::Rows => t.cols() == first.cols(),
                Axis::Cols => t.rows() == first.rows(),
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            tensors.push(t);
        }
        let out = match axis {
            Axis::Rows => {
                let rows = tensors.iter().map(|t| t.rows()).sum();
                let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::matrix(rows, first.cols(), data)?
            }
            Axis::Cols => {
                let cols = tensors.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(first.rows() * cols);
                for r in 0..first.rows() {
                    for t in &tensors {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::matrix(first.rows(), cols, data)?
            }
        };
        self.push(Op::Concat(parts.to_vec(), axis), out, "concat")
    }

    /// Softmax of every row, with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.require_matrix(a, "row_softmax")?;
        let out = row_softmax(av);
        self.push(Op::RowSoftmax(a), out, "row_softmax")
    }

    /// Euclidean norm of every row, as an `n x 1` column.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.require_matrix(a, "row_l2_norm")?;
        let norms = (0..av.rows())
            .map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Op::RowL2Norm(a), Tensor::column(norms), "row_l2_norm")
    }

    /// Forward value of `a`, no gradient to anything upstream.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.clone();
        self.push(Op::StopGradient, out, "stop_gradient")
    }

    /// Fused `sg(hard - soft) + soft`: the forward value is exactly `hard`,
    /// the gradient flows to `soft` unchanged.
    pub fn straight_through(&mut self, hard: &Tensor, soft: Var) -> Result<Var> {
        let sv = self.check(soft)?;
        if sv.shape() != hard.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: hard.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        self.push(Op::StraightThrough(soft), hard.clone(), "straight_through")
    }

    fn require_matrix(&self, a: Var, op: &'static str) -> Result<&Tensor> {
        let t = self.check(a)?;
        if !t.is_matrix() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok(t)
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every leaf.
    pub fn backward(&self, output: Var) -> Result<GradientMap> {
        let out = self.check(output)?;
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for input in inputs_of(&node.op) {
                if input.0 >= idx {
                    return Err(Error::CyclicTape {
                        node: idx,
                        input: input.0,
                    });
                }
            }
            self.propagate(idx, &g, &mut adj)?;
            // leaves keep their adjoint for the result
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }

        let mut grads = BTreeMap::new();
        for &leaf in &self.leaves {
            let g = adj
                .get_mut(leaf.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(leaf).shape()));
            grads.insert(leaf, g);
        }
        Ok(GradientMap { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), reduce_to(g, bv, *bc)),
                    BinaryKind::Sub => (g.clone(), reduce_to(g, bv, *bc).map(|x| -x)),
                    BinaryKind::Mul => {
                        let ga = zip_broadcast(g, bv, *bc, |x, y| x * y);
                        let gab = zip_same(g, av, |x, y| x * y);
                        (ga, reduce_to(&gab, bv, *bc))
                    }
                    BinaryKind::Div => {
                        let ga = zip_broadcast(g, bv, *bc, |x, y| x / y);
                        // d(a/b)/db = -a/b^2 = -(a/b)/b
                        let q = zip_same(g, &node.value, |x, y| -x * y);
                        let gb = reduce_to(&zip_broadcast(&q, bv, *bc, |x, y| x / y), bv, *bc);
                        (ga, gb)
                    }
                };
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Scale(a, k) => accumulate(adj, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(adj, *a, matmul_bt(g, bv));
                accumulate(adj, *b, matmul_at(av, g));
            }
            Op::Relu(a) => {
                let ga = zip_same(g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                accumulate(adj, *a, ga);
            }
            Op::Exp(a) => accumulate(adj, *a, zip_same(g, &node.value, |x, y| x * y)),
            Op::Log(a) => {
                let ga = zip_same(g, self.value(*a), |x, y| x / y.max(LOG_EPS));
                accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(adj, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                accumulate(adj, *a, Tensor::full(av.shape(), g.item() / av.len() as f64));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let av = self.value(*a);
                let scale = match (&node.op, axis) {
                    (Op::MeanAxis(..), Axis::Rows) => 1.0 / av.rows() as f64,
                    (Op::MeanAxis(..), Axis::Cols) => 1.0 / av.cols() as f64,
                    _ => 1.0,
                };
                let bc = match axis {
                    Axis::Rows => Broadcast::Row,
                    Axis::Cols => Broadcast::Col,
                };
                let zeros = Tensor::zeros(av.shape());
                accumulate(adj, *a, zip_broadcast(&zeros, g, bc, |_, y| y * scale));
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let mut part = Tensor::zeros(pv.shape());
                    match axis {
                        Axis::Rows => {
                            let n = pv.len();
                            part.data_mut()
                                .copy_from_slice(&g.data()[offset * pv.cols()..][..n]);
                            offset += pv.rows();
                        }
                        Axis::Cols => {
                            for r in 0..pv.rows() {
                                let src = &g.row(r)[offset..offset + pv.cols()];
                                let c = pv.cols();
                                part.data_mut()[r * c..(r + 1) * c].copy_from_slice(src);
                            }
                            offset += pv.cols();
                        }
                    }
                    accumulate(adj, p, part);
                }
            }
            Op::RowSoftmax(a) => {
                let s = &node.value;
                let mut ga = Tensor::zeros(s.shape());
                let c = s.cols();
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga.data_mut()[r * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::RowL2Norm(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let n = node.value.data()[r];
                    if n > 0.0 {
                        let k = g.data()[r] / n;
                        for j in 0..c {
                            ga.data_mut()[r * c + j] = k * av.get(r, j);
                        }
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::StraightThrough(soft) => accumulate(adj, *soft, g.clone()),
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant | Op::StopGradient => Vec::new(),
        Op::Binary(_, a, b, _) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumAxis(a, _)
        | Op::MeanAxis(a, _)
        | Op::RowSoftmax(a)
        | Op::RowL2Norm(a)
        | Op::StraightThrough(a) => vec![*a],
        Op::Concat(parts, _) => parts.clone(),
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (x, y) in existing.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.shape() == b.shape() {
        Some(Broadcast::Same)
    } else if b.len() == 1 && (b.shape().is_empty() || b.shape().iter().all(|&d| d == 1)) {
        Some(Broadcast::Scalar)
    } else if a.is_matrix() && b.is_matrix() && b.rows() == 1 && b.cols() == a.cols() {
        Some(Broadcast::Row)
    } else if a.is_matrix() && b.is_matrix() && b.cols() == 1 && b.rows() == a.rows() {
        Some(Broadcast::Col)
    } else {
        None
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    zip_broadcast(a, b, Broadcast::Same, f)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    let bd = b.data();
    match bc {
        Broadcast::Same => {
            for (x, &y) in out.data_mut().iter_mut().zip(bd) {
                *x = f(*x, y);
            }
        }
        Broadcast::Scalar => {
            let y = bd[0];
            for x in out.data_mut() {
                *x = f(*x, y);
            }
        }
        Broadcast::Row => {
            let c = a.cols();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = f(*x, bd[i % c]);
            }
        }
        Broadcast::Col => {
            let c = a.cols();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = f(*x, bd[i / c]);
            }
        }
    }
    out
}

/// Sums a full-shape adjoint back down to the shape of a broadcast operand.
fn reduce_to(g: &Tensor, b: &Tensor, bc: Broadcast) -> Tensor {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::full(b.shape(), g.data().iter().sum()),
        Broadcast::Row => reduce_axis(g, Axis::Rows),
        Broadcast::Col => reduce_axis(g, Axis::Cols),
    }
}

fn reduce_axis(a: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    match axis {
        Axis::Rows => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(a.row(i)) {
                    *o += x;
                }
            }
            Tensor::matrix(1, c, out).expect("shape")
        }
        Axis::Cols => Tensor::column((0..r).map(|i| a.row(i).iter().sum()).collect()),
    }
}

pub(crate) fn row_softmax(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let c = a.cols();
    for r in 0..a.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += x * y;
            }
        }
    }
    Tensor::matrix(n, m, out).expect("shape")
}

/// `g * b^T`
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, k) = (g.rows(), g.cols(), b.rows());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gr = g.row(i);
        for p in 0..k {
            out[i * k + p] = gr.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(b.cols(), m);
    Tensor::matrix(n, k, out).expect("shape")
}

/// `a^T * g`
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let gr = g.row(i);
        for (p, &x) in a.row(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, y) in out[p * m..(p + 1) * m].iter_mut().zip(gr) {
                *o += x * y;
            }
        }
    }
    Tensor::matrix(k, m, out).expect("shape")
}

/// Central finite differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every
/// coordinate of every parameter tensor.
///
/// The baseline loss is evaluated twice and must agree bitwise, which catches
/// loss functions that draw fresh randomness per call.
pub fn finite_difference_gradient<F>(mut loss_fn: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = loss_fn(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = loss_fn(&work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}
