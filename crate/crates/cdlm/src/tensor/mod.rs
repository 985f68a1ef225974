//! Minimal reverse-mode autodiff tensor engine.
//!
//! A `Graph` is an append-only tape of operations; `Tensor` handles index into
//! it. The backward pass walks the tape once in reverse append order and
//! accumulates adjoints into every `requires_grad` leaf. Graphs are
//! single-threaded units; independent graphs may live on separate threads.
//!
//! Every forward op checks its output for NaN/Inf and fails fast — silent
//! divergence would invalidate downstream ablation comparisons.

mod conv;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{CdlmError, Result};
use crate::num::Scalar;

pub use conv::{conv_out_extent, convt_out_extent};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, T),
    Square(NodeId),
    Sqrt(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    Broadcast(NodeId),
    Reshape(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Clamp(NodeId, T, T),
    GradReverse(NodeId, T),
    // these record provenance on the tape; backward treats them as leaves,
    // so the upstream id is never traversed
    Detach(#[allow(dead_code)] NodeId),
    RowMaxDetached(#[allow(dead_code)] NodeId),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Cloning is a cheap handle copy.
pub struct Graph<T: Scalar> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node.
pub struct Tensor<T: Scalar> {
    graph: Graph<T>,
    id: NodeId,
    shape: Vec<usize>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(CdlmError::NonFinite { op, index: i });
        }
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Tensor<T>> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(op_name, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape: shape.clone(),
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Tensor {
            graph: self.clone(),
            id,
            shape,
        })
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        self.tensor(shape, data, true)
    }

    /// Non-differentiable input (data batches, noise draws).
    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        self.tensor(shape, data, false)
    }

    fn tensor(&self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Tensor<T>> {
        if numel(shape) != data.len() {
            return Err(CdlmError::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(CdlmError::Config(format!("zero extent in shape {shape:?}")));
        }
        self.push("leaf", shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, v: T) -> Result<Tensor<T>> {
        self.constant(&[1], vec![v])
    }

    /// Clear all accumulated gradients on the tape.
    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: NodeId) -> Vec<T> {
        self.nodes.borrow()[id].value.clone()
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn value(&self) -> Vec<T> {
        self.graph.value_of(self.id)
    }

    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.graph.nodes.borrow()[self.id].value[0]
    }

    /// Accumulated gradient, if backward has touched this node.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn same_graph(&self, other: &Tensor<T>) -> Result<()> {
        if !Rc::ptr_eq(&self.graph.nodes, &other.graph.nodes) {
            return Err(CdlmError::Usage(
                "operands belong to different graphs".into(),
            ));
        }
        Ok(())
    }

    fn binary_elementwise(
        &self,
        other: &Tensor<T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Tensor<T>> {
        self.same_graph(other)?;
        if self.shape != other.shape {
            return Err(CdlmError::ShapeMismatch {
                op: op_name,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        let out: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        self.graph.push(op_name, self.shape.clone(), out, op, rg)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    fn unary(
        &self,
        op_name: &'static str,
        f: impl Fn(T) -> T,
        op: Op<T>,
        domain: Option<&dyn Fn(T) -> bool>,
    ) -> Result<Tensor<T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id].value;
        if let Some(ok) = domain {
            if let Some(bad) = a.iter().find(|&&v| !ok(v)) {
                return Err(CdlmError::Domain {
                    op: op_name,
                    detail: format!("value {bad} outside domain"),
                });
            }
        }
        let out: Vec<T> = a.iter().map(|&x| f(x)).collect();
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.graph.push(op_name, self.shape.clone(), out, op, rg)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary("exp", |x| x.exp(), Op::Exp(self.id), None)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary(
            "log",
            |x| x.ln(),
            Op::Log(self.id),
            Some(&|v: T| v > T::zero()),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            Op::Sigmoid(self.id),
            None,
        )
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        self.unary("tanh", |x| x.tanh(), Op::Tanh(self.id), None)
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Tensor<T>> {
        self.unary(
            "leaky_relu",
            |x| if x >= T::zero() { x } else { x * slope },
            Op::LeakyRelu(self.id, slope),
            None,
        )
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary("square", |x| x * x, Op::Square(self.id), None)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary(
            "sqrt",
            |x| x.sqrt(),
            Op::Sqrt(self.id),
            Some(&|v: T| v > T::zero()),
        )
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        self.unary("scale", |x| x * c, Op::Scale(self.id, c), None)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar(self.id, c), None)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where unclamped.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Tensor<T>> {
        self.unary(
            "clamp",
            |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            Op::Clamp(self.id, lo, hi),
            None,
        )
    }

    /// Identity forward, adjoint multiplied by `-scale` on the way back.
    pub fn grad_reverse(&self, scale: T) -> Result<Tensor<T>> {
        self.unary("grad_reverse", |x| x, Op::GradReverse(self.id, scale), None)
    }

    /// Identity forward, gradient blocked.
    pub fn detach(&self) -> Result<Tensor<T>> {
        let nodes = self.graph.nodes.borrow();
        let out = nodes[self.id].value.clone();
        drop(nodes);
        self.graph
            .push("detach", self.shape.clone(), out, Op::Detach(self.id), false)
    }

    /// Mean over all elements, scalar output.
    pub fn mean(&self) -> Result<Tensor<T>> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id].value;
        let n = T::from_f64_c(a.len() as f64);
        let s: T = a.iter().copied().sum();
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.graph
            .push("mean", vec![1], vec![s / n], Op::Mean(self.id), rg)
    }

    /// Sum over all elements, scalar output.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let nodes = self.graph.nodes.borrow();
        let s: T = nodes[self.id].value.iter().copied().sum();
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.graph
            .push("sum", vec![1], vec![s], Op::Sum(self.id), rg)
    }

    /// `[b, n] -> [b, 1]` row-wise sum.
    pub fn row_sum(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(CdlmError::ShapeMismatch {
                op: "row_sum",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (b, n) = (self.shape[0], self.shape[1]);
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id].value;
        let out: Vec<T> = (0..b).map(|i| a[i * n..(i + 1) * n].iter().copied().sum()).collect();
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.graph
            .push("row_sum", vec![b, 1], out, Op::RowSum(self.id), rg)
    }

    /// `[b, n] -> [b, 1]` row-wise max, treated as a constant (no gradient).
    /// Intended for numerically stable softmax shifts.
    pub fn row_max_detached(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(CdlmError::ShapeMismatch {
                op: "row_max",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (b, n) = (self.shape[0], self.shape[1]);
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id].value;
        let out: Vec<T> = (0..b)
            .map(|i| {
                a[i * n..(i + 1) * n]
                    .iter()
                    .copied()
                    .fold(T::neg_infinity(), T::max)
            })
            .collect();
        drop(nodes);
        self.graph
            .push("row_max", vec![b, 1], out, Op::RowMaxDetached(self.id), false)
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(CdlmError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value();
        let rg = self.requires_grad();
        self.graph
            .push("reshape", shape.to_vec(), value, Op::Reshape(self.id), rg)
    }

    /// Expand size-1 axes to a larger shape of equal rank.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.len() != self.shape.len()
            || self
                .shape
                .iter()
                .zip(shape.iter())
                .any(|(&s, &d)| s != d && s != 1)
        {
            return Err(CdlmError::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let in_strides = row_major_strides(&self.shape);
        let out_strides = row_major_strides(shape);
        let total = numel(shape);
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id].value;
        let mut out = vec![T::zero(); total];
        for (flat, o) in out.iter_mut().enumerate() {
            let mut src = 0;
            for d in 0..shape.len() {
                let idx = (flat / out_strides[d]) % shape[d];
                if self.shape[d] != 1 {
                    src += idx * in_strides[d];
                }
            }
            *o = a[src];
        }
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.graph
            .push("broadcast", shape.to_vec(), out, Op::Broadcast(self.id), rg)
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_graph(other)?;
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(CdlmError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let nodes = self.graph.nodes.borrow();
        let out = mm_nn(&nodes[self.id].value, &nodes[other.id].value, m, k, n);
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        self.graph
            .push("matmul", vec![m, n], out, Op::Matmul(self.id, other.id), rg)
    }

    /// NCHW cross-correlation. Weight layout `[co, ci, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        self.same_graph(weight)?;
        let xs = shape4(&self.shape, "conv2d input")?;
        let ws = shape4(&weight.shape, "conv2d kernel")?;
        if xs.1 != ws.1 {
            return Err(CdlmError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        let oh = conv_out_extent(xs.2, ws.2, stride, pad);
        let ow = conv_out_extent(xs.3, ws.3, stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(CdlmError::Config(format!(
                    "conv2d produces non-positive output for input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                    self.shape, weight.shape
                )))
            }
        };
        let nodes = self.graph.nodes.borrow();
        let out = conv::conv2d_fwd(
            &nodes[self.id].value,
            xs,
            &nodes[weight.id].value,
            ws,
            stride,
            pad,
            (oh, ow),
        );
        let rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
        drop(nodes);
        self.graph.push(
            "conv2d",
            vec![xs.0, ws.0, oh, ow],
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                stride,
                pad,
            },
            rg,
        )
    }

    /// NCHW transposed convolution. Weight layout `[ci, co, kh, kw]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        self.same_graph(weight)?;
        let xs = shape4(&self.shape, "conv_transpose2d input")?;
        let ws = shape4(&weight.shape, "conv_transpose2d kernel")?;
        if xs.1 != ws.0 {
            return Err(CdlmError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        let oh = convt_out_extent(xs.2, ws.2, stride, pad);
        let ow = convt_out_extent(xs.3, ws.3, stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(CdlmError::Config(format!(
                    "conv_transpose2d produces non-positive output for input {:?}, kernel {:?}",
                    self.shape, weight.shape
                )))
            }
        };
        let nodes = self.graph.nodes.borrow();
        let out = conv::convt2d_fwd(
            &nodes[self.id].value,
            xs,
            &nodes[weight.id].value,
            ws,
            stride,
            pad,
            (oh, ow),
        );
        let rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
        drop(nodes);
        self.graph.push(
            "conv_transpose2d",
            vec![xs.0, ws.1, oh, ow],
            out,
            Op::ConvT2d {
                x: self.id,
                w: weight.id,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar loss. Adjoints accumulate into the
    /// `grad` slot of every `requires_grad` node; repeated calls without
    /// `Graph::zero_grads` keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(CdlmError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let nodes = self.graph.nodes.borrow();
        if !nodes[self.id].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        adj[self.id] = Some(vec![T::one()]);

        for i in (0..=self.id).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            backprop_node(&nodes, i, &dy, &mut adj);
            // re-stash so leaf adjoints survive to the write-back phase
            adj[i] = Some(dy);
        }
        drop(nodes);

        let mut nodes = self.graph.nodes.borrow_mut();
        for (i, a) in adj.into_iter().enumerate() {
            let Some(a) = a else { continue };
            let node = &mut nodes[i];
            if !node.requires_grad {
                continue;
            }
            let grad = node
                .grad
                .get_or_insert_with(|| vec![T::zero(); numel(&node.shape)]);
            for (g, d) in grad.iter_mut().zip(a.iter()) {
                *g += *d;
            }
        }
        Ok(())
    }
}

fn shape4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(CdlmError::Config(format!(
            "{what} must be 4-D NCHW, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    target: NodeId,
    contrib: impl FnOnce() -> Vec<T>,
) {
    if !nodes[target].requires_grad {
        return;
    }
    let c = contrib();
    match &mut adj[target] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(c.iter()) {
                *e += *v;
            }
        }
        slot => *slot = Some(c),
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: NodeId, dy: &[T], adj: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf | Op::Detach(_) | Op::RowMaxDetached(_) => {}
        Op::Add(a, b) => {
            accumulate(nodes, adj, *a, || dy.to_vec());
            accumulate(nodes, adj, *b, || dy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, adj, *a, || dy.to_vec());
            accumulate(nodes, adj, *b, || dy.iter().map(|&d| -d).collect());
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate(nodes, adj, a, || {
                dy.iter()
                    .zip(nodes[b].value.iter())
                    .map(|(&d, &v)| d * v)
                    .collect()
            });
            accumulate(nodes, adj, b, || {
                dy.iter()
                    .zip(nodes[a].value.iter())
                    .map(|(&d, &v)| d * v)
                    .collect()
            });
        }
        Op::Matmul(a, b) => {
            let (a, b) = (*a, *b);
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            accumulate(nodes, adj, a, || mm_nt(dy, &nodes[b].value, m, n, k));
            accumulate(nodes, adj, b, || mm_tn(&nodes[a].value, dy, m, k, n));
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (x, w) = (*x, *w);
            let xs = (
                nodes[x].shape[0],
                nodes[x].shape[1],
                nodes[x].shape[2],
                nodes[x].shape[3],
            );
            let ws = (
                nodes[w].shape[0],
                nodes[w].shape[1],
                nodes[w].shape[2],
                nodes[w].shape[3],
            );
            let os = (node.shape[2], node.shape[3]);
            accumulate(nodes, adj, x, || {
                conv::conv2d_dx(dy, xs, &nodes[w].value, ws, *stride, *pad, os)
            });
            accumulate(nodes, adj, w, || {
                conv::conv2d_dw(dy, &nodes[x].value, xs, ws, *stride, *pad, os)
            });
        }
        Op::ConvT2d { x, w, stride, pad } => {
            let (x, w) = (*x, *w);
            let xs = (
                nodes[x].shape[0],
                nodes[x].shape[1],
                nodes[x].shape[2],
                nodes[x].shape[3],
            );
            let ws = (
                nodes[w].shape[0],
                nodes[w].shape[1],
                nodes[w].shape[2],
                nodes[w].shape[3],
            );
            let os = (node.shape[2], node.shape[3]);
            accumulate(nodes, adj, x, || {
                conv::convt2d_dx(dy, xs, &nodes[w].value, ws, *stride, *pad, os)
            });
            accumulate(nodes, adj, w, || {
                conv::convt2d_dw(dy, &nodes[x].value, xs, ws, *stride, *pad, os)
            });
        }
        Op::Exp(a) => accumulate(nodes, adj, *a, || {
            dy.iter()
                .zip(node.value.iter())
                .map(|(&d, &y)| d * y)
                .collect()
        }),
        Op::Log(a) => {
            let a = *a;
            accumulate(nodes, adj, a, || {
                dy.iter()
                    .zip(nodes[a].value.iter())
                    .map(|(&d, &x)| d / x)
                    .collect()
            })
        }
        Op::Sigmoid(a) => accumulate(nodes, adj, *a, || {
            dy.iter()
                .zip(node.value.iter())
                .map(|(&d, &y)| d * y * (T::one() - y))
                .collect()
        }),
        Op::Tanh(a) => accumulate(nodes, adj, *a, || {
            dy.iter()
                .zip(node.value.iter())
                .map(|(&d, &y)| d * (T::one() - y * y))
                .collect()
        }),
        Op::LeakyRelu(a, slope) => {
            let (a, slope) = (*a, *slope);
            accumulate(nodes, adj, a, || {
                dy.iter()
                    .zip(nodes[a].value.iter())
                    .map(|(&d, &x)| if x >= T::zero() { d } else { d * slope })
                    .collect()
            })
        }
        Op::Square(a) => {
            let a = *a;
            let two = T::from_f64_c(2.0);
            accumulate(nodes, adj, a, || {
                dy.iter()
                    .zip(nodes[a].value.iter())
                    .map(|(&d, &x)| d * two * x)
                    .collect()
            })
        }
        Op::Sqrt(a) => {
            let half = T::from_f64_c(0.5);
            accumulate(nodes, adj, *a, || {
                dy.iter()
                    .zip(node.value.iter())
                    .map(|(&d, &y)| d * half / y)
                    .collect()
            })
        }
        Op::Mean(a) => {
            let a = *a;
            let n = numel(&nodes[a].shape);
            let g = dy[0] / T::from_f64_c(n as f64);
            accumulate(nodes, adj, a, || vec![g; n]);
        }
        Op::Sum(a) => {
            let a = *a;
            let n = numel(&nodes[a].shape);
            accumulate(nodes, adj, a, || vec![dy[0]; n]);
        }
        Op::RowSum(a) => {
            let a = *a;
            let (b, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            accumulate(nodes, adj, a, || {
                let mut out = vec![T::zero(); b * n];
                for i in 0..b {
                    for j in 0..n {
                        out[i * n + j] = dy[i];
                    }
                }
                out
            });
        }
        Op::Broadcast(a) => {
            let a = *a;
            let in_shape = &nodes[a].shape;
            let out_shape = &node.shape;
            let in_strides = row_major_strides(in_shape);
            let out_strides = row_major_strides(out_shape);
            accumulate(nodes, adj, a, || {
                let mut out = vec![T::zero(); numel(in_shape)];
                for (flat, &d) in dy.iter().enumerate() {
                    let mut src = 0;
                    for dim in 0..out_shape.len() {
                        let idx = (flat / out_strides[dim]) % out_shape[dim];
                        if in_shape[dim] != 1 {
                            src += idx * in_strides[dim];
                        }
                    }
                    out[src] += d;
                }
                out
            });
        }
        Op::Reshape(a) => accumulate(nodes, adj, *a, || dy.to_vec()),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, adj, *a, || dy.iter().map(|&d| d * c).collect())
        }
        Op::AddScalar(a, _) => accumulate(nodes, adj, *a, || dy.to_vec()),
        Op::Clamp(a, lo, hi) => {
            let (a, lo, hi) = (*a, *lo, *hi);
            accumulate(nodes, adj, a, || {
                dy.iter()
                    .zip(nodes[a].value.iter())
                    .map(|(&d, &x)| if x >= lo && x <= hi { d } else { T::zero() })
                    .collect()
            })
        }
        Op::GradReverse(a, scale) => {
            let scale = *scale;
            accumulate(nodes, adj, *a, || {
                dy.iter().map(|&d| -d * scale).collect()
            })
        }
    }
}

fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let br = &b[l * n..(l + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a [m,n] x b^T` where `b` is `[k,n]` -> `[m,k]`.
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let br = &b[l * n..(l + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in ar.iter().zip(br.iter()) {
                acc = acc + av * bv;
            }
            out[i * k + l] = acc;
        }
    }
    out
}

/// `a^T x b` where `a` is `[m,k]`, `b` is `[m,n]` -> `[k,n]`.
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let or = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    #[test]
    fn matmul_identity_and_hand_case() {
        let g = G::new();
        let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&v).unwrap().value(), vec![3.0, 4.0]);

        let a = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().value(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let g = G::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv2d_scaling_case() {
        let g = G::new();
        let x = g.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = g.constant(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.value(), vec![2.0; 9]);
    }

    #[test]
    fn conv2d_impulse_reproduces_kernel() {
        let g = G::new();
        let mut img = vec![0.0; 25];
        img[12] = 1.0; // centre of 5x5
        let x = g.constant(&[1, 1, 5, 5], img).unwrap();
        let kernel: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = g.constant(&[1, 1, 3, 3], kernel.clone()).unwrap();
        let y = x.conv2d(&w, 1, 1).unwrap();
        let v = y.value();
        // impulse at (2,2): output (2+dh, 2+dw) sees kernel[1-dh][1-dw] under
        // cross-correlation, i.e. the kernel appears flipped around the impulse
        for dh in -1i64..=1 {
            for dw in -1i64..=1 {
                let out = v[((2 + dh) * 5 + (2 + dw)) as usize];
                let kv = kernel[((1 - dh) * 3 + (1 - dw)) as usize];
                assert_eq!(out, kv);
            }
        }
    }

    #[test]
    fn conv2d_non_positive_output_is_config_error() {
        let g = G::new();
        let x = g.constant(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let w = g.constant(&[1, 1, 5, 5], vec![0.0; 25]).unwrap();
        assert!(matches!(
            x.conv2d(&w, 1, 0),
            Err(CdlmError::Config(_))
        ));
    }

    #[test]
    fn elementwise_trivia() {
        let g = G::new();
        let zero = g.constant(&[1], vec![0.0]).unwrap();
        assert_eq!(zero.sigmoid().unwrap().value(), vec![0.5]);
        let x = g.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x.mean().unwrap().value(), vec![2.5]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let g = G::new();
        let x = g.constant(&[2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(x.log(), Err(CdlmError::Domain { .. })));
        let y = g.constant(&[1], vec![0.0]).unwrap();
        assert!(matches!(y.sqrt(), Err(CdlmError::Domain { .. })));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = G::new();
        let x = g.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_square_sum() {
        let g = G::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let g = G::new();
        let x = g.leaf(&[2], vec![1.0, 1.0]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        g.zero_grads();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = G::new();
        let x = g.leaf(&[2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(x.backward(), Err(CdlmError::Usage(_))));
    }

    #[test]
    fn grad_reverse_identity_forward_flipped_backward() {
        let g = G::new();
        let x = g.leaf(&[2], vec![1.5, -2.0]).unwrap();
        let y = x.grad_reverse(1.0).unwrap();
        assert_eq!(y.value(), vec![1.5, -2.0]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0, -1.0]);

        g.zero_grads();
        let y2 = x.grad_reverse(0.5).unwrap();
        y2.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-0.5, -0.5]);
    }

    #[test]
    fn broadcast_row_vector() {
        let g = G::new();
        let b = g.leaf(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = b.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(y.value(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn nan_fails_fast() {
        let g = G::new();
        let x = g.constant(&[1], vec![1.0e308]).unwrap();
        // overflow to Inf in mul
        assert!(matches!(
            x.mul(&x),
            Err(CdlmError::NonFinite { .. })
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = G::new();
        let x = g.leaf(&[2], vec![2.0, 3.0]).unwrap();
        let d = x.detach().unwrap();
        let loss = x.mul(&d).unwrap().sum().unwrap();
        loss.backward().unwrap();
        // d treated as constant: d(sum x*d)/dx = d
        assert_eq!(x.grad().unwrap(), vec![2.0, 3.0]);
    }
}
