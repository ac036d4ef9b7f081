use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Concat(usize, usize),
    SliceCols { x: usize, start: usize, end: usize },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumAxis(usize, usize),
    L2Norm(usize),
    L2NormAxis(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in construction order, so every node's inputs have
/// smaller ids and the graph is acyclic by construction. A tape is confined to
/// one thread; independent tapes may run on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf, honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let rg = tensor.requires_grad();
        self.push_leaf(tensor, rg)
    }

    /// Registers a trainable leaf.
    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.push_leaf(tensor, true)
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push_leaf(tensor, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&self, mut tensor: Tensor, requires_grad: bool) -> Var<'_> {
        tensor.zero_grad();
        let tensor = tensor.with_requires_grad(requires_grad);
        self.push(tensor, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value"))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a single-element `loss`, adding into the gradient
    /// buffer of every leaf that requires grad. Calling it again without
    /// [`Tape::zero_grad`] accumulates a second contribution.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let loss_numel = self.nodes.borrow()[loss.id].value.numel();
        if loss_numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut nodes[id];
            if let (Op::Leaf, Some(g)) = (node.op, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot => *slot = Some(delta),
    }
}

/// Gradient for an operand of a binary op that may have been broadcast from a
/// single element.
fn unbroadcast(delta: Vec<f64>, operand_numel: usize) -> Vec<f64> {
    if operand_numel == 1 && delta.len() != 1 {
        vec![delta.iter().sum()]
    } else {
        delta
    }
}

/// Index into a possibly single-element operand.
#[inline]
fn bidx(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a].requires_grad {
                accumulate(grads, nodes, a, kernels::gemm_nt(g, bv.data(), m, n, k));
            }
            if nodes[b].requires_grad {
                accumulate(grads, nodes, b, kernels::gemm_tn(av.data(), g, m, k, n));
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let an = nodes[a].value.numel();
            let bn = nodes[b].value.numel();
            accumulate(grads, nodes, a, unbroadcast(g.to_vec(), an));
            accumulate(grads, nodes, b, unbroadcast(g.iter().map(|v| sign * v).collect(), bn));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                let d = g.iter().enumerate().map(|(i, gi)| gi * bidx(bv, i)).collect();
                accumulate(grads, nodes, a, unbroadcast(d, av.numel()));
            }
            if nodes[b].requires_grad {
                let d = g.iter().enumerate().map(|(i, gi)| gi * bidx(av, i)).collect();
                accumulate(grads, nodes, b, unbroadcast(d, bv.numel()));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                let d = g.iter().enumerate().map(|(i, gi)| gi / bidx(bv, i)).collect();
                accumulate(grads, nodes, a, unbroadcast(d, av.numel()));
            }
            if nodes[b].requires_grad {
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let bi = bidx(bv, i);
                        -gi * bidx(av, i) / (bi * bi)
                    })
                    .collect();
                accumulate(grads, nodes, b, unbroadcast(d, bv.numel()));
            }
        }
        Op::Scale(x, s) => accumulate(grads, nodes, x, g.iter().map(|v| v * s).collect()),
        Op::Offset(x) | Op::Reshape(x) => accumulate(grads, nodes, x, g.to_vec()),
        Op::Relu(x) => {
            let xv = nodes[x].value.data();
            let d = g
                .iter()
                .zip(xv)
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(grads, nodes, x, d);
        }
        Op::Sigmoid(x) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(gi, y)| gi * y * (1.0 - y))
                .collect();
            accumulate(grads, nodes, x, d);
        }
        Op::Exp(x) => {
            let d = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
            accumulate(grads, nodes, x, d);
        }
        Op::Log(x) => {
            let xv = nodes[x].value.data();
            let d = g.iter().zip(xv).map(|(gi, xi)| gi / xi).collect();
            accumulate(grads, nodes, x, d);
        }
        Op::Concat(a, b) => {
            let (m, p) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let q = nodes[b].value.shape()[1];
            accumulate(grads, nodes, a, kernels::slice_cols(g, m, p + q, 0, p));
            accumulate(grads, nodes, b, kernels::slice_cols(g, m, p + q, p, p + q));
        }
        Op::SliceCols { x, start, end } => {
            let shape = nodes[x].value.shape();
            let (m, n) = (shape[0], shape[1]);
            let w = end - start;
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                d[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            accumulate(grads, nodes, x, d);
        }
        Op::Transpose(x) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            accumulate(grads, nodes, x, kernels::transpose(g, m, n));
        }
        Op::Sum(x) => {
            let n = nodes[x].value.numel();
            accumulate(grads, nodes, x, vec![g[0]; n]);
        }
        Op::SumAxis(x, axis) => {
            let d = kernels::spread_axis(g, nodes[x].value.shape(), axis);
            accumulate(grads, nodes, x, d);
        }
        Op::L2Norm(x) => {
            let norm = out.data()[0];
            let d = nodes[x].value.data().iter().map(|xi| g[0] * xi / norm).collect();
            accumulate(grads, nodes, x, d);
        }
        Op::L2NormAxis(x, axis) => {
            let xv = &nodes[x].value;
            let (outer, len, inner) = kernels::axis_extents(xv.shape(), axis);
            let mut d = vec![0.0; xv.numel()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let r = o * inner + i;
                        let idx = (o * len + l) * inner + i;
                        d[idx] = g[r] * xv.data()[idx] / out.data()[r];
                    }
                }
            }
            accumulate(grads, nodes, x, d);
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands belong to different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = if a.shape() == b.shape() || b.numel() == 1 {
            a.shape().to_vec()
        } else if a.numel() == 1 {
            b.shape().to_vec()
        } else {
            return Err(Error::dim(name, a.shape(), b.shape()));
        };
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let (x, y) = (bidx(&a, i), bidx(&b, i));
            data.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain {
                            op: "div",
                            detail: format!("division by zero at element {i}"),
                        });
                    }
                    x / y
                }
            });
        }
        let op = match kind {
            Binary::Add => Op::Add(self.id, other.id),
            Binary::Sub => Op::Sub(self.id, other.id),
            Binary::Mul => Op::Mul(self.id, other.id),
            Binary::Div => Op::Div(self.id, other.id),
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x * s).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&self, c: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x + c).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Offset(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    /// `max(x, 0)` with derivative 0 at exactly 0.
    pub fn relu(&self) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value();
        let data = v
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x.exp()).collect();
        self.unary(Tensor::new(v.shape(), data).unwrap(), Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some((i, x)) = v.data().iter().enumerate().find(|(_, &x)| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x} at element {i}"),
            });
        }
        let data = v.data().iter().map(|x| x.ln()).collect();
        Ok(self.unary(Tensor::new(v.shape(), data)?, Op::Log(self.id)))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = self.value().matmul(&other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = self.value().concat_cols(&other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Concat(self.id, other.id), rg))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice_cols(start, end)?;
        Ok(self.unary(out, Op::SliceCols { x: self.id, start, end }))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::dim("sum_axis", v.shape(), &[axis]));
        }
        let data = kernels::sum_axis(v.data(), v.shape(), axis);
        let out = Tensor::new(&kernels::reduced_shape(v.shape(), axis), data)?;
        Ok(self.unary(out, Op::SumAxis(self.id, axis)))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&self) -> Result<Var<'t>> {
        let norm = self.value().l2_norm();
        if norm == 0.0 && self.requires_grad() {
            return Err(Error::Degenerate {
                what: "l2_norm input",
                index: 0,
            });
        }
        Ok(self.unary(Tensor::scalar(norm), Op::L2Norm(self.id)))
    }

    /// Euclidean norm of each fibre along `axis`.
    pub fn l2_norm_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::dim("l2_norm_axis", v.shape(), &[axis]));
        }
        let squares: Vec<f64> = v.data().iter().map(|x| x * x).collect();
        let data: Vec<f64> = kernels::sum_axis(&squares, v.shape(), axis)
            .into_iter()
            .map(f64::sqrt)
            .collect();
        if self.requires_grad() {
            if let Some(index) = data.iter().position(|&n| n == 0.0) {
                return Err(Error::Degenerate {
                    what: "l2_norm fibre",
                    index,
                });
            }
        }
        let out = Tensor::new(&kernels::reduced_shape(v.shape(), axis), data)?;
        Ok(self.unary(out, Op::L2NormAxis(self.id, axis)))
    }
}
