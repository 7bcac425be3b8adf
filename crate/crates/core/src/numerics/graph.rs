//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, so the node list is already a topological order and the
//! backward pass is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{broadcast_shape, for_each_broadcast, gemm, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Square(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sin(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    Softmax(usize),
    LayerNorm(usize, f64),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    StopGradient(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Square(_) => "square",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Sin(_) => "sin",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Sin(a)
            | Op::Abs(a)
            | Op::Clamp(a, ..)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Slice(a, ..)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::StopGradient(a) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            Op::StopGradient(_) => false,
            other => other.parents().iter().any(|&p| nodes[p].needs_grad),
        };
        nodes.push(Node { value, op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A free input whose gradient is reported by [`Backward::wrt`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// The leaf bound to parameter `id`; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let var = self.push(store.value(id).clone(), Op::Param);
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Name of the first recorded op whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes.borrow().iter().find(|n| !n.value.all_finite()).map(|n| n.op.name())
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Backward> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(NumericsError::shape(
                "backward",
                format!("output must be a scalar, got {:?}", nodes[output.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self.param_nodes.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Backward { grads, params })
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf | Op::Param | Op::StopGradient(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Minimum(a, b) | Op::Maximum(a, b) => {
            for (target, wrt_a) in [(*a, true), (*b, false)] {
                if nodes[target].needs_grad {
                    let grad = binary_grad(&node.op, wrt_a, &nodes[*a].value, &nodes[*b].value, node.value.shape(), g);
                    deposit(grads, target, grad);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let ta = &nodes[a].value;
            let tb = &nodes[b].value;
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(ga) = accumulate(grads, nodes, a) {
                gemm(m, n, k, g, false, tb.data(), true, ga, 1.0);
            }
            if let Some(gb) = accumulate(grads, nodes, b) {
                gemm(k, m, n, ta.data(), true, g, false, gb, 1.0);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                // y is (r x c), x is (c x r)
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Neg(a) => unary(grads, nodes, *a, g, |_, _| -1.0, y),
        Op::Scale(a, s) => {
            let s = *s;
            unary(grads, nodes, *a, g, |_, _| s, y)
        }
        Op::Offset(a) | Op::Reshape(a) => unary(grads, nodes, *a, g, |_, _| 1.0, y),
        Op::Square(a) => unary(grads, nodes, *a, g, |x, _| 2.0 * x, y),
        Op::Sigmoid(a) => unary(grads, nodes, *a, g, |_, y| y * (1.0 - y), y),
        Op::Tanh(a) => unary(grads, nodes, *a, g, |_, y| 1.0 - y * y, y),
        Op::Softplus(a) => unary(grads, nodes, *a, g, |x, _| stable_sigmoid(x), y),
        Op::Exp(a) => unary(grads, nodes, *a, g, |_, y| y, y),
        Op::Log(a) => unary(grads, nodes, *a, g, |x, _| 1.0 / x, y),
        Op::Relu(a) => unary(grads, nodes, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, y),
        Op::Sin(a) => unary(grads, nodes, *a, g, |x, _| x.cos(), y),
        Op::Abs(a) => unary(
            grads,
            nodes,
            *a,
            g,
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            y,
        ),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            unary(grads, nodes, *a, g, |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 }, y)
        }
        Op::SumAll(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::MeanAll(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::SumAxis(a, axis) => {
            let shape = nodes[*a].value.shape().to_vec();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                let (outer, n, inner) = split_axis(&shape, *axis);
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            ga[(o * n + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let cols = node.value.cols();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (row, (gr, yr)) in g.chunks(cols).zip(y.chunks(cols)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    let out = &mut ga[row * cols..(row + 1) * cols];
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o += y * (g - dot);
                    }
                }
            }
        }
        Op::LayerNorm(a, eps) => {
            let x = nodes[*a].value.data();
            let cols = node.value.cols();
            let eps = *eps;
            if let Some(ga) = accumulate(grads, nodes, *a) {
                let n = cols as f64;
                for row in 0..x.len() / cols {
                    let xr = &x[row * cols..(row + 1) * cols];
                    let yr = &y[row * cols..(row + 1) * cols];
                    let gr = &g[row * cols..(row + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for j in 0..cols {
                        ga[row * cols + j] += rstd * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
            }
        }
        Op::Concat(parts, axis) => {
            let out_shape = node.value.shape().to_vec();
            let (outer, _, inner) = split_axis(&out_shape, *axis);
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.shape()[*axis] * inner;
                if let Some(gp) = accumulate(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        for (d, s) in gp[o * width..(o + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += width;
            }
        }
        Op::Slice(a, axis, start) => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let out_shape = node.value.shape().to_vec();
            let (outer, n_in, inner) = split_axis(&in_shape, *axis);
            let n_out = out_shape[*axis];
            let start = *start;
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for o in 0..outer {
                    for k in 0..n_out {
                        let src = (o * n_out + k) * inner;
                        let dst = (o * n_in + start + k) * inner;
                        for i in 0..inner {
                            ga[dst + i] += g[src + i];
                        }
                    }
                }
            }
        }
        Op::GatherRows(a, rows) => {
            let cols = node.value.cols();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        ga[r * cols + j] += g[k * cols + j];
                    }
                }
            }
        }
    }
}

/// Gradient of a binary op's output with respect to one operand, reduced to
/// that operand's shape.
fn binary_grad(op: &Op, wrt_a: bool, a: &Tensor, b: &Tensor, out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let one = |_: f64, _: f64| 1.0;
    match (op, wrt_a) {
        (Op::Add(..), _) | (Op::Sub(..), true) => reduce_grad(wrt_a, a, b, out_shape, g, one),
        (Op::Sub(..), false) => reduce_grad(wrt_a, a, b, out_shape, g, |_, _| -1.0),
        (Op::Mul(..), true) => reduce_grad(wrt_a, a, b, out_shape, g, |_, y| y),
        (Op::Mul(..), false) => reduce_grad(wrt_a, a, b, out_shape, g, |x, _| x),
        (Op::Div(..), true) => reduce_grad(wrt_a, a, b, out_shape, g, |_, y| 1.0 / y),
        (Op::Div(..), false) => reduce_grad(wrt_a, a, b, out_shape, g, |x, y| -x / (y * y)),
        (Op::Minimum(..), true) => reduce_grad(wrt_a, a, b, out_shape, g, |x, y| (x <= y) as u8 as f64),
        (Op::Minimum(..), false) => reduce_grad(wrt_a, a, b, out_shape, g, |x, y| (x > y) as u8 as f64),
        (Op::Maximum(..), true) => reduce_grad(wrt_a, a, b, out_shape, g, |x, y| (x >= y) as u8 as f64),
        (Op::Maximum(..), false) => reduce_grad(wrt_a, a, b, out_shape, g, |x, y| (x < y) as u8 as f64),
        _ => unreachable!("not a binary op"),
    }
}

fn reduce_grad(
    wrt_a: bool,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    g: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let (va, vb) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return (0..g.len()).map(|i| g[i] * deriv(va[i], vb[i])).collect();
    }
    let target_shape = if wrt_a { a.shape() } else { b.shape() };
    let mut out = vec![0.0; if wrt_a { va.len() } else { vb.len() }];
    if target_shape == out_shape {
        for_each_broadcast(out_shape, a.shape(), b.shape(), |o, ia, ib| out[o] = g[o] * deriv(va[ia], vb[ib]));
    } else if wrt_a {
        for_each_broadcast(out_shape, a.shape(), b.shape(), |o, ia, ib| out[ia] += g[o] * deriv(va[ia], vb[ib]));
    } else {
        for_each_broadcast(out_shape, a.shape(), b.shape(), |o, ia, ib| out[ib] += g[o] * deriv(va[ia], vb[ib]));
    }
    out
}

/// Adds `grad` into the gradient slot of node `id`, taking ownership when the slot is empty.
fn deposit(grads: &mut [Option<Vec<f64>>], id: usize, grad: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (t, s) in existing.iter_mut().zip(&grad) {
                *t += s;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

fn unary(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: usize,
    g: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    y: &[f64],
) {
    if nodes[a].needs_grad {
        let x = nodes[a].value.data();
        deposit(grads, a, (0..g.len()).map(|i| g[i] * deriv(x[i], y[i])).collect());
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Backward {
    /// Gradient with respect to `var`, or `None` if no gradient reached it.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(&var.shape(), g.clone()).expect("gradient shape"))
    }

    /// Parameter gradients, zero-filled for parameters the output does not touch.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for &(p, node) in &self.params {
            if let Some(Some(g)) = self.grads.get(node) {
                out.add_slice(p, g);
            }
        }
        out
    }
}

macro_rules! unary_op {
    ($(#[$doc:meta])* $name:ident, $variant:ident, $f:expr) => {
        $(#[$doc])*
        pub fn $name(self) -> Var<'g> {
            let f: fn(f64) -> f64 = $f;
            let value = self.map_value(f);
            self.graph.push(value, Op::$variant(self.id))
        }
    };
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    fn map_value(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.graph.nodes.borrow();
        let t = &nodes[self.id].value;
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn binary(self, other: Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize, usize)> {
        let nodes = self.graph.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            NumericsError::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
        })?;
        let (da, db) = (a.data(), b.data());
        let out = if a.shape() == b.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; shape.iter().product()];
            for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        Ok((Tensor::new(&shape, out)?, self.id, other.id))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (t, a, b) = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.graph.push(t, Op::Add(a, b)))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (t, a, b) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.graph.push(t, Op::Sub(a, b)))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (t, a, b) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.graph.push(t, Op::Mul(a, b)))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (t, a, b) = self.binary(other, "div", |x, y| x / y)?;
        Ok(self.graph.push(t, Op::Div(a, b)))
    }

    pub fn minimum(self, other: Var<'g>) -> Result<Var<'g>> {
        let (t, a, b) = self.binary(other, "minimum", |x, y| if x <= y { x } else { y })?;
        Ok(self.graph.push(t, Op::Minimum(a, b)))
    }

    pub fn maximum(self, other: Var<'g>) -> Result<Var<'g>> {
        let (t, a, b) = self.binary(other, "maximum", |x, y| if x >= y { x } else { y })?;
        Ok(self.graph.push(t, Op::Maximum(a, b)))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(NumericsError::shape(
                    "matmul",
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            Tensor::new(&[m, n], out)?
        };
        Ok(self.graph.push(value, Op::MatMul(self.id, other.id)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(self) -> Result<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 {
                return Err(NumericsError::shape("transpose", format!("expected rank 2, got {:?}", a.shape())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(&[c, r], out)?
        };
        Ok(self.graph.push(value, Op::Transpose(self.id)))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let value = self.map_value(|v| v * s);
        self.graph.push(value, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let value = self.map_value(|v| v + c);
        self.graph.push(value, Op::Offset(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let value = self.map_value(|v| v.clamp(lo, hi));
        self.graph.push(value, Op::Clamp(self.id, lo, hi))
    }

    unary_op!(neg, Neg, |v| -v);
    unary_op!(square, Square, |v| v * v);
    unary_op!(sigmoid, Sigmoid, stable_sigmoid);
    unary_op!(tanh, Tanh, f64::tanh);
    unary_op!(softplus, Softplus, stable_softplus);
    unary_op!(exp, Exp, f64::exp);
    unary_op!(log, Log, f64::ln);
    unary_op!(relu, Relu, |v| v.max(0.0));
    unary_op!(sin, Sin, f64::sin);
    unary_op!(abs, Abs, f64::abs);

    /// Passes the value through and blocks gradient flow.
    pub fn stop_gradient(self) -> Var<'g> {
        let value = self.value();
        self.graph.push(value, Op::StopGradient(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let t = self.value();
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.graph.push(Tensor::scalar(m), Op::MeanAll(self.id))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let t = self.value();
        if axis >= t.rank() {
            return Err(NumericsError::shape("sum_axis", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * n + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        Ok(self.graph.push(Tensor::new(&shape, out)?, Op::SumAxis(self.id, axis)))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let t = self.value();
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.graph.push(value, Op::Softmax(self.id))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let t = self.value();
        let cols = t.cols();
        let n = cols as f64;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.graph.push(value, Op::LayerNorm(self.id, eps))
    }

    /// Half-open slice `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let t = self.value();
        if axis >= t.rank() || start > end || end > t.shape()[axis] {
            return Err(NumericsError::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + width * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        Ok(self.graph.push(Tensor::new(&shape, out)?, Op::Slice(self.id, axis, start)))
    }

    /// Selects rows (first axis) of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        if t.rank() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(NumericsError::shape("gather_rows", format!("indices {rows:?} into {:?}", t.shape())));
        }
        let mut out = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(&[rows.len(), t.cols()], out)?;
        Ok(self.graph.push(value, Op::GatherRows(self.id, rows.to_vec())))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshaped(shape)?;
        Ok(self.graph.push(value, Op::Reshape(self.id)))
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| NumericsError::shape("concat", "no inputs".to_string()))?;
    let graph = first.graph;
    let value = {
        let nodes = graph.nodes.borrow();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
        let base = shapes[0];
        let compatible = axis < base.len()
            && shapes.iter().all(|s| {
                s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b)
            });
        if !compatible {
            return Err(NumericsError::shape("concat", format!("incompatible shapes {shapes:?} on axis {axis}")));
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let width = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Tensor::new(&shape, out)?
    };
    Ok(graph.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(eye.matmul(x).unwrap().value(), x.value());
    }

    #[test]
    fn constant_softmax_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 5], 2.5));
        let y = x.softmax().value();
        assert!(y.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1000.0, 1000.0, -1000.0]));
        let y = x.softmax().value();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let err = a.add(g.constant(Tensor::zeros(&[3, 2]))).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn stop_gradient_blocks_but_keeps_value() {
        let g = Graph::new();
        let x = g.variable(t(&[1], &[3.0]));
        let y = x.square().stop_gradient();
        assert_eq!(y.item(), 9.0);
        let z = y.mul(x).unwrap().sum();
        let b = g.backward(z).unwrap();
        // d/dx (stop(x^2) * x) = stop(x^2) = 9
        assert_eq!(b.wrt(x).unwrap().item(), 9.0);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3, 2]));
        let bias = g.variable(t(&[1, 2], &[1.0, 2.0]));
        let y = x.add(bias).unwrap().sum();
        assert_eq!(y.item(), 9.0);
        let b = g.backward(y).unwrap();
        assert_eq!(b.wrt(bias).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_then_slice_round_trip() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice(1, 1, 3).unwrap().value(), b.value());
    }

    #[test]
    fn non_finite_is_located() {
        let g = Graph::new();
        let x = g.constant(t(&[1], &[-1.0]));
        let _ = x.log();
        assert_eq!(g.first_non_finite(), Some("log"));
    }
}
