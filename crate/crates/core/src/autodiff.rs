//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse. Nodes that do not depend on any parameter leaf are
//! never visited during the backward pass.

use std::cell::RefCell;
use std::f64::consts::{LN_2, PI};

use crate::error::TensorError;
use crate::tensor::Tensor;

type Res<T> = Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sum(usize),
    SumCols(usize),
    SumRows(usize),
    Tanh(usize),
    Gelu(usize),
    Softplus(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    LogSoftmax(usize),
    Clip(usize, f64, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    BroadcastRows(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph. Build one per step and drop it afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Res<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// Output dims of a broadcasting binary op over `(rows, cols)` views.
fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Res<(usize, usize)> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

fn output_shape(a: &Tensor, b: &Tensor, dims: (usize, usize)) -> Vec<usize> {
    if a.dims2() == dims && a.len() >= b.len() {
        a.shape().to_vec()
    } else if b.dims2() == dims {
        b.shape().to_vec()
    } else {
        vec![dims.0, dims.1]
    }
}

/// Row and column strides of a `(rows, cols)` operand broadcast to a larger shape.
#[inline]
fn strides(dims: (usize, usize)) -> (usize, usize) {
    (if dims.0 == 1 { 0 } else { dims.1 }, usize::from(dims.1 != 1))
}

fn broadcast_map(a: &Tensor, b: &Tensor, dims: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    if a.dims2() == dims && b.dims2() == dims {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    if a.dims2() == dims && b.len() == 1 {
        let y = bd[0];
        return ad.iter().map(|&x| f(x, y)).collect();
    }
    let (rows, cols) = dims;
    let ((ar, ac), (br, bc)) = (strides(a.dims2()), strides(b.dims2()));
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(f(ad[r * ar + c * ac], bd[r * br + c * bc]));
        }
    }
    out
}

/// Adds `local(x_a, x_b, grad_out)` into `acc` (shaped like operand `which`),
/// summing over broadcast dimensions.
fn broadcast_accumulate(
    acc: &mut [f64],
    target_dims: (usize, usize),
    a: &Tensor,
    b: &Tensor,
    grad: &[f64],
    dims: (usize, usize),
    local: impl Fn(f64, f64, f64) -> f64,
) {
    let (ad, bd) = (a.data(), b.data());
    let (adims, bdims) = (a.dims2(), b.dims2());
    if adims == dims && bdims == dims {
        for (i, slot) in acc.iter_mut().enumerate() {
            *slot += local(ad[i], bd[i], grad[i]);
        }
        return;
    }
    let (rows, cols) = dims;
    let ((ar, ac), (br, bc), (tr, tc)) = (strides(adims), strides(bdims), strides(target_dims));
    for r in 0..rows {
        let g = &grad[r * cols..(r + 1) * cols];
        for (c, &gk) in g.iter().enumerate() {
            acc[r * tr + c * tc] += local(ad[r * ar + c * ac], bd[r * br + c * bc], gk);
        }
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C = A * B` for row-major matrices, optionally accumulating into `C`.
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
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: pointers cover m*k, k*n and m*n elements with the given strides.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant_owned(Tensor::scalar(value))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var<'_>) -> Res<Gradients> {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, node, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn unary_acc(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    x: usize,
    out: &Tensor,
    grad: &[f64],
    local: impl Fn(f64, f64) -> f64,
) {
    let xv = nodes[x].value.data();
    if let Some(acc) = slot(grads, nodes, x) {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += grad[i] * local(xv[i], out.data()[i]);
        }
    }
}

fn backprop_node(nodes: &[Node], node: &Node, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = av.dims2();
            let n = bv.cols();
            if let Some(acc) = slot(grads, nodes, *a) {
                // dA = dC * B^T
                gemm(m, n, k, grad, (n as isize, 1), bv.data(), (1, n as isize), acc, true);
            }
            if let Some(acc) = slot(grads, nodes, *b) {
                // dB = A^T * dC
                gemm(k, m, n, av.data(), (1, k as isize), grad, (n as isize, 1), acc, true);
            }
        }
        Op::Affine(x, w, b) => {
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let (m, k) = xv.dims2();
            let n = wv.cols();
            if let Some(acc) = slot(grads, nodes, *x) {
                gemm(m, n, k, grad, (n as isize, 1), wv.data(), (1, n as isize), acc, true);
            }
            if let Some(acc) = slot(grads, nodes, *w) {
                gemm(k, m, n, xv.data(), (1, k as isize), grad, (n as isize, 1), acc, true);
            }
            if let Some(acc) = slot(grads, nodes, *b) {
                for row in grad.chunks_exact(n) {
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += g;
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let dims = out.dims2();
            let op = node.op.clone();
            if let Some(acc) = slot(grads, nodes, *a) {
                let local = move |_x: f64, y: f64, g: f64| match op {
                    Op::Add(..) | Op::Sub(..) => g,
                    Op::Mul(..) => g * y,
                    _ => g / y,
                };
                broadcast_accumulate(acc, av.dims2(), av, bv, grad, dims, local);
            }
            let op = node.op.clone();
            if let Some(acc) = slot(grads, nodes, *b) {
                let local = move |x: f64, y: f64, g: f64| match op {
                    Op::Add(..) => g,
                    Op::Sub(..) => -g,
                    Op::Mul(..) => g * x,
                    _ => -g * x / (y * y),
                };
                broadcast_accumulate(acc, bv.dims2(), av, bv, grad, dims, local);
            }
        }
        Op::AddScalar(x) => unary_acc(grads, nodes, *x, out, grad, |_, _| 1.0),
        Op::MulScalar(x, c) => {
            let c = *c;
            unary_acc(grads, nodes, *x, out, grad, move |_, _| c)
        }
        Op::Sum(x) => {
            if let Some(acc) = slot(grads, nodes, *x) {
                let g = grad[0];
                acc.iter_mut().for_each(|a| *a += g);
            }
        }
        Op::SumCols(x) => {
            let cols = nodes[*x].value.cols();
            if let Some(acc) = slot(grads, nodes, *x) {
                for (r, chunk) in acc.chunks_mut(cols).enumerate() {
                    chunk.iter_mut().for_each(|a| *a += grad[r]);
                }
            }
        }
        Op::SumRows(x) | Op::BroadcastRows(x) => {
            // SumRows: [R,C] -> [1,C], BroadcastRows: [1,C] -> [R,C]
            let is_sum = matches!(node.op, Op::SumRows(_));
            let (xr, xc) = nodes[*x].value.dims2();
            if let Some(acc) = slot(grads, nodes, *x) {
                if is_sum {
                    for r in 0..xr {
                        for c in 0..xc {
                            acc[r * xc + c] += grad[c];
                        }
                    }
                } else {
                    let rows = out.rows();
                    for r in 0..rows {
                        for c in 0..xc {
                            acc[c] += grad[r * xc + c];
                        }
                    }
                }
            }
        }
        Op::Tanh(x) => unary_acc(grads, nodes, *x, out, grad, |_, y| 1.0 - y * y),
        Op::Gelu(x) => unary_acc(grads, nodes, *x, out, grad, |x, _| {
            std_normal_cdf(x) + x * std_normal_pdf(x)
        }),
        Op::Softplus(x) => unary_acc(grads, nodes, *x, out, grad, |x, _| sigmoid(x)),
        Op::Relu(x) => unary_acc(grads, nodes, *x, out, grad, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Exp(x) => unary_acc(grads, nodes, *x, out, grad, |_, y| y),
        Op::Log(x) => unary_acc(grads, nodes, *x, out, grad, |x, _| 1.0 / x),
        Op::Sqrt(x) => unary_acc(grads, nodes, *x, out, grad, |_, y| 0.5 / y),
        Op::Square(x) => unary_acc(grads, nodes, *x, out, grad, |x, _| 2.0 * x),
        Op::Clip(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            unary_acc(grads, nodes, *x, out, grad, move |x, _| {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Op::LogSoftmax(x) => {
            let cols = out.cols();
            if let Some(acc) = slot(grads, nodes, *x) {
                for (r, y) in out.data().chunks(cols).enumerate() {
                    let g = &grad[r * cols..(r + 1) * cols];
                    let total: f64 = g.iter().sum();
                    for c in 0..cols {
                        acc[r * cols + c] += g[c] - y[c].exp() * total;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let cols = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(acc) = slot(grads, nodes, p) {
                    for (r, chunk) in acc.chunks_mut(pc).enumerate() {
                        for (c, a) in chunk.iter_mut().enumerate() {
                            *a += grad[r * cols + offset + c];
                        }
                    }
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(acc) = slot(grads, nodes, p) {
                    for (a, g) in acc.iter_mut().zip(&grad[offset..offset + len]) {
                        *a += g;
                    }
                }
                offset += len;
            }
        }
        Op::SliceCols(x, start) => {
            let xc = nodes[*x].value.cols();
            let oc = out.cols();
            let start = *start;
            if let Some(acc) = slot(grads, nodes, *x) {
                for (r, g) in grad.chunks(oc).enumerate() {
                    for (c, gv) in g.iter().enumerate() {
                        acc[r * xc + start + c] += gv;
                    }
                }
            }
        }
        Op::SliceRows(x, start) => {
            let xc = nodes[*x].value.cols();
            let offset = *start * xc;
            if let Some(acc) = slot(grads, nodes, *x) {
                for (a, g) in acc[offset..offset + grad.len()].iter_mut().zip(grad) {
                    *a += g;
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros if `var` does not
    /// influence the root.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the stored value without cloning it.
    pub fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.with_value(|t| t.dims2())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn emit(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Res<Var<'g>> {
        check_finite(op_name, value.data())?;
        let requires = self.graph.requires(inputs);
        Ok(self.graph.push(value, op, requires))
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Res<Var<'g>> {
        let value = self.with_value(|t| t.map(f));
        self.emit(name, value, op, &[self.id])
    }

    fn binary(
        &self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Res<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let dims = broadcast_dims(name, a, b)?;
            let shape = output_shape(a, b, dims);
            Tensor::from_parts(shape, broadcast_map(a, b, dims, f))
        };
        self.emit(name, value, op, &[self.id, other.id])
    }

    pub fn matmul(&self, other: Var<'g>) -> Res<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let ((m, k), (k2, n)) = (a.dims2(), b.dims2());
            if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
                return Err(TensorError::Shape {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out, false);
            Tensor::from_parts(vec![m, n], out)
        };
        self.emit("matmul", value, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self * weight + bias` with `bias` a `[1, n]` row added to every row.
    pub fn affine(&self, weight: Var<'g>, bias: Var<'g>) -> Res<Var<'g>> {
        self.same_graph(&weight);
        self.same_graph(&bias);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (x, w, b) = (&nodes[self.id].value, &nodes[weight.id].value, &nodes[bias.id].value);
            let ((m, k), (k2, n)) = (x.dims2(), w.dims2());
            if x.shape().len() != 2 || w.shape().len() != 2 || k != k2 {
                return Err(TensorError::Shape {
                    op: "affine",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            if b.dims2() != (1, n) {
                return Err(TensorError::Shape {
                    op: "affine",
                    lhs: vec![m, n],
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(b.data());
            }
            gemm(m, k, n, x.data(), (k as isize, 1), w.data(), (n as isize, 1), &mut out, true);
            Tensor::from_parts(vec![m, n], out)
        };
        let ids = [self.id, weight.id, bias.id];
        self.emit("affine", value, Op::Affine(self.id, weight.id, bias.id), &ids)
    }

    pub fn add(&self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'g>) -> Res<Var<'g>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(&self, c: f64) -> Res<Var<'g>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Res<Var<'g>> {
        self.unary("mul_scalar", |x| x * c, Op::MulScalar(self.id, c))
    }

    pub fn neg(&self) -> Res<Var<'g>> {
        self.mul_scalar(-1.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Res<Var<'g>> {
        let value = Tensor::scalar(self.with_value(|t| t.sum()));
        self.emit("sum", value, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Res<Var<'g>> {
        let n = self.with_value(|t| t.len()) as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    /// Per-row sums: `[R, C] -> [R, 1]`.
    pub fn sum_cols(&self) -> Res<Var<'g>> {
        let value = self.with_value(|t| {
            let (r, c) = t.dims2();
            let data = t.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
            Tensor::from_parts(vec![r, 1], data)
        });
        self.emit("sum_cols", value, Op::SumCols(self.id), &[self.id])
    }

    /// Per-column sums: `[R, C] -> [1, C]`.
    pub fn sum_rows(&self) -> Res<Var<'g>> {
        let value = self.with_value(|t| {
            let (r, c) = t.dims2();
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (d, v) in data.iter_mut().zip(t.row_slice(i)) {
                    *d += v;
                }
            }
            Tensor::from_parts(vec![1, c], data)
        });
        self.emit("sum_rows", value, Op::SumRows(self.id), &[self.id])
    }

    /// Per-column means: `[R, C] -> [1, C]`.
    pub fn mean_rows(&self) -> Res<Var<'g>> {
        let r = self.dims2().0 as f64;
        self.sum_rows()?.mul_scalar(1.0 / r)
    }

    pub fn tanh(&self) -> Res<Var<'g>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    /// Exact `x * Phi(x)` formulation.
    pub fn gelu(&self) -> Res<Var<'g>> {
        self.unary("gelu", |x| x * std_normal_cdf(x), Op::Gelu(self.id))
    }

    pub fn softplus(&self) -> Res<Var<'g>> {
        self.unary("softplus", softplus, Op::Softplus(self.id))
    }

    pub fn relu(&self) -> Res<Var<'g>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Res<Var<'g>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Res<Var<'g>> {
        if let Some(bad) = self.with_value(|t| t.data().iter().copied().find(|&v| v <= 0.0)) {
            return Err(TensorError::Invalid {
                op: "log",
                reason: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Res<Var<'g>> {
        if let Some(bad) = self.with_value(|t| t.data().iter().copied().find(|&v| v <= 0.0)) {
            return Err(TensorError::Invalid {
                op: "sqrt",
                reason: format!("non-positive input {bad}"),
            });
        }
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Res<Var<'g>> {
        self.unary("square", |x| x * x, Op::Square(self.id))
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Res<Var<'g>> {
        self.unary("clip", |x| x.clamp(lo, hi), Op::Clip(self.id, lo, hi))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self) -> Res<Var<'g>> {
        let value = self.with_value(|t| {
            let (_, c) = t.dims2();
            let mut out = Vec::with_capacity(t.len());
            for row in t.data().chunks(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        });
        self.emit("log_softmax", value, Op::LogSoftmax(self.id), &[self.id])
    }

    /// Values are copied into a leaf that blocks gradient flow.
    pub fn stop_gradient(&self) -> Var<'g> {
        self.graph.constant_owned(self.value())
    }

    /// `[1, C] -> [rows, C]`.
    pub fn broadcast_rows(&self, rows: usize) -> Res<Var<'g>> {
        let value = self.with_value(|t| {
            if t.rows() != 1 {
                return Err(TensorError::Shape {
                    op: "broadcast_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![rows, t.cols()],
                });
            }
            let mut data = Vec::with_capacity(rows * t.cols());
            for _ in 0..rows {
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::from_parts(vec![rows, t.cols()], data))
        })?;
        self.emit("broadcast_rows", value, Op::BroadcastRows(self.id), &[self.id])
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Res<Var<'g>> {
        let value = self.with_value(|t| {
            let (r, c) = t.dims2();
            if start > end || end > c {
                return Err(TensorError::Invalid {
                    op: "slice_cols",
                    reason: format!("range {start}..{end} outside {c} columns"),
                });
            }
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&t.row_slice(i)[start..end]);
            }
            Ok(Tensor::from_parts(vec![r, end - start], data))
        })?;
        self.emit("slice_cols", value, Op::SliceCols(self.id, start), &[self.id])
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Res<Var<'g>> {
        let value = self.with_value(|t| {
            let r = t.rows();
            if start > end || end > r {
                return Err(TensorError::Invalid {
                    op: "slice_rows",
                    reason: format!("range {start}..{end} outside {r} rows"),
                });
            }
            Ok(t.slice_rows(start, end))
        })?;
        self.emit("slice_rows", value, Op::SliceRows(self.id, start), &[self.id])
    }
}

/// Concatenates matrices with equal row counts side by side.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Res<Var<'g>> {
    let first = parts.first().expect("concat of nothing");
    let value = {
        let nodes = first.graph.nodes.borrow();
        let rows = nodes[first.id].value.rows();
        let cols: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
        for p in parts {
            first.same_graph(p);
            let v = &nodes[p.id].value;
            if v.rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: nodes[first.id].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.row_slice(r));
            }
        }
        Tensor::from_parts(vec![rows, cols], data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    first.emit("concat_cols", value, Op::ConcatCols(ids.clone()), &ids)
}

/// Stacks matrices with equal column counts.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Res<Var<'g>> {
    let first = parts.first().expect("concat of nothing");
    let value = {
        let nodes = first.graph.nodes.borrow();
        let tensors: Vec<&Tensor> = parts
            .iter()
            .map(|p| {
                first.same_graph(p);
                &nodes[p.id].value
            })
            .collect();
        Tensor::vstack(&tensors).map_err(|_| TensorError::Shape {
            op: "concat_rows",
            lhs: tensors[0].shape().to_vec(),
            rhs: tensors.iter().find(|t| t.cols() != tensors[0].cols()).unwrap().shape().to_vec(),
        })?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    first.emit("concat_rows", value, Op::ConcatRows(ids.clone()), &ids)
}

/// Diagonal Gaussian log-density summed over columns: `[B, D] -> [B, 1]`.
///
/// `variance` may be a scalar, a `[1, D]` row or a full `[B, D]` matrix.
pub fn gaussian_log_pdf<'g>(x: Var<'g>, mean: Var<'g>, variance: Var<'g>) -> Res<Var<'g>> {
    if let Some(bad) = variance.with_value(|t| t.data().iter().copied().find(|&v| v <= 0.0)) {
        return Err(TensorError::Invalid {
            op: "gaussian_log_pdf",
            reason: format!("variance must be positive, got {bad}"),
        });
    }
    let quad = x.sub(mean)?.square()?.div(variance)?;
    let log_norm = variance.mul_scalar(2.0 * PI)?.log()?;
    quad.add(log_norm)?.mul_scalar(-0.5)?.sum_cols()
}

/// `log(1 - tanh(x)^2)` evaluated as `2 (ln 2 - x - softplus(-2x))`.
pub fn log_one_minus_tanh_sq<'g>(x: Var<'g>) -> Res<Var<'g>> {
    let sp = x.mul_scalar(-2.0)?.softplus()?;
    x.add(sp)?.mul_scalar(-2.0)?.add_scalar(2.0 * LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
        }};
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_of_zero() {
        let g = Graph::new();
        assert_eq!(g.scalar(0.0).tanh().unwrap().item(), 0.0);
    }

    #[test]
    fn log_softmax_uniform() {
        let g = Graph::new();
        let y = g.constant(&t(&[1, 3], &[0.0, 0.0, 0.0])).log_softmax().unwrap();
        for v in y.value().data() {
            assert_close!(*v, -(3.0f64).ln(), 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = g.constant(&Tensor::eye(2)).matmul(g.constant(&m)).unwrap();
        assert_eq!(out.value(), m);
    }

    #[test]
    fn affine_matches_matmul_plus_bias() {
        let x = t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]);
        let w = t(&[2, 4], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
        let b = t(&[1, 4], &[1.0, -1.0, 0.5, 0.0]);
        let run = |fused: bool| {
            let g = Graph::new();
            let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&b));
            let y = if fused { xv.affine(wv, bv) } else { xv.matmul(wv).and_then(|m| m.add(bv)) };
            let y = y.unwrap();
            let grads = g.backward(y.tanh().unwrap().sum().unwrap()).unwrap();
            (y.value(), grads.wrt(xv), grads.wrt(wv), grads.wrt(bv))
        };
        let (a, b) = (run(true), run(false));
        for (p, q) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2), (&a.3, &b.3)] {
            for (u, v) in p.data().iter().zip(q.data()) {
                assert_close!(*u, *v, 1e-14);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let err = g
            .constant(&Tensor::zeros(&[2, 3]))
            .matmul(g.constant(&Tensor::zeros(&[2, 3])))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn add_shape_error() {
        let g = Graph::new();
        let err = g
            .constant(&Tensor::zeros(&[2, 3]))
            .add(g.constant(&Tensor::zeros(&[3, 2])))
            .unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "add", .. }));
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = x.square().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn sum_tanh_gradient() {
        let g = Graph::new();
        let x = g.param(&t(&[2], &[0.0, 1.0]));
        let y = x.tanh().unwrap().sum().unwrap();
        let grad = g.backward(y).unwrap().wrt(x);
        assert_close!(grad.data()[0], 1.0, 1e-15);
        assert_close!(grad.data()[1], 1.0 - 1f64.tanh().powi(2), 1e-15);
        assert_close!(grad.data()[1], 0.41997, 1e-5);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let g = Graph::new();
        let x = g.param(&t(&[2], &[0.0, 1.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot { .. })));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let y = x.square().unwrap();
        let z = y.stop_gradient().mul(x).unwrap();
        let grads = g.backward(z).unwrap();
        // d/dx (sg(x^2) * x) = x^2
        assert_eq!(grads.wrt(x).item(), 4.0);
        let w = x.square().unwrap().stop_gradient().sum().unwrap();
        assert_eq!(g.backward(w).unwrap().wrt(x).item(), 0.0);
    }

    #[test]
    fn accumulates_over_reuse() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(1.5));
        let y = x.mul(x).unwrap().add(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 4.0);
    }

    #[test]
    fn backward_is_repeatable() {
        let g = Graph::new();
        let x = g.param(&t(&[1, 2], &[0.3, -0.2]));
        let y = x.gelu().unwrap().sum().unwrap();
        let a = g.backward(y).unwrap().wrt(x);
        let b = g.backward(y).unwrap().wrt(x);
        assert_eq!(a, b);
    }

    #[test]
    fn broadcast_row_and_column() {
        let g = Graph::new();
        let m = g.param(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = g.param(&t(&[1, 3], &[10.0, 20.0, 30.0]));
        let c = g.param(&t(&[2, 1], &[100.0, 200.0]));
        let y = m.add(r).unwrap().add(c).unwrap();
        assert_eq!(y.value().data(), &[111.0, 122.0, 133.0, 214.0, 225.0, 236.0]);
        let grads = g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(r).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn nan_results_are_errors() {
        let g = Graph::new();
        let x = g.constant(&Tensor::scalar(800.0));
        assert!(matches!(x.exp(), Err(TensorError::NonFinite { op: "exp", .. })));
        assert!(g.scalar(-1.0).log().is_err());
    }

    #[test]
    fn gaussian_log_pdf_values() {
        let g = Graph::new();
        let zero = g.constant(&Tensor::zeros(&[1, 1]));
        let one = g.scalar(1.0);
        let lp = gaussian_log_pdf(zero, zero, one).unwrap();
        assert_close!(lp.item(), -0.918_938_533_204_672_7, 1e-12);

        let x = g.constant(&t(&[1, 1], &[1.0]));
        let lp = gaussian_log_pdf(x, zero, g.scalar(2.0)).unwrap();
        assert_close!(lp.item(), -0.5 * (4.0 * PI).ln() - 0.25, 1e-12);
        assert_close!(lp.item(), -1.515512, 1e-6);

        // x == mean: quadratic term vanishes
        let d = 4;
        let v = 0.7;
        let m = g.constant(&Tensor::full(&[1, d], 0.4));
        let lp = gaussian_log_pdf(m, m, g.scalar(v)).unwrap();
        assert_close!(lp.item(), -(d as f64 / 2.0) * (2.0 * PI * v).ln(), 1e-12);
    }

    #[test]
    fn gaussian_log_pdf_rejects_bad_variance() {
        let g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[1, 2]));
        assert!(gaussian_log_pdf(x, x, g.scalar(0.0)).is_err());
        let var = g.constant(&t(&[1, 2], &[1.0, -1.0]));
        assert!(gaussian_log_pdf(x, x, var).is_err());
    }

    #[test]
    fn log_one_minus_tanh_sq_matches_direct() {
        let g = Graph::new();
        let x = g.constant(&t(&[1, 3], &[0.0, 3.0, -1.2]));
        let y = log_one_minus_tanh_sq(x).unwrap().value();
        for (v, xi) in y.data().iter().zip([0.0f64, 3.0, -1.2]) {
            assert_close!(*v, (1.0 - xi.tanh().powi(2)).ln(), 1e-12);
        }
        // stays finite far in the tails
        let far = g.constant(&t(&[1, 1], &[40.0]));
        assert!(log_one_minus_tanh_sq(far).unwrap().item().is_finite());
    }

    #[test]
    fn slices_and_concat_roundtrip() {
        let g = Graph::new();
        let x = g.param(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = x.slice_cols(0, 1).unwrap();
        let b = x.slice_cols(1, 3).unwrap();
        let y = concat_cols(&[a, b]).unwrap();
        assert_eq!(y.value(), x.value());
        let top = x.slice_rows(0, 1).unwrap();
        let bottom = x.slice_rows(1, 2).unwrap();
        assert_eq!(concat_rows(&[top, bottom]).unwrap().value(), x.value());
        let grads = g.backward(y.square().unwrap().sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }
}
