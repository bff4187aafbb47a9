//! Computation tape and differentiable operations.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::real::Real;
use crate::tensor::{numel, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    MaskedSoftmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        denom: T,
    },
    BceWithLogits {
        logits: usize,
        labels: Vec<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Reshape(usize),
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients. Used for inference.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position that [`Tape::rewind`] can later truncate to.
    pub fn mark(&self) -> usize {
        self.len()
    }

    /// Drops every node recorded after `mark`. Vars created after the mark
    /// must not be used again.
    pub fn rewind(&self, mark: usize) {
        self.nodes.borrow_mut().truncate(mark);
    }

    /// Records a leaf; it tracks gradients when the tensor requires them
    /// and the tape has gradients enabled.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf_with_param(t, None)
    }

    pub(crate) fn leaf_with_param(&self, t: &Tensor<T>, param: Option<usize>) -> Var<'_, T> {
        let rg = self.grad_enabled && t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg, param)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, None)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                op: "constant",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false, None))
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<usize>,
    ) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        if !self.grad_enabled {
            return false;
        }
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates 2-D vars along `axis` (0 = rows, 1 = columns).
    pub fn concat<'t>(&'t self, vars: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if vars.is_empty() {
            return Err(TensorError::contract("concat", "no inputs"));
        }
        if axis > 1 {
            return Err(TensorError::contract("concat", "axis must be 0 or 1"));
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[ids[0]].shape;
            if first.len() != 2 {
                return Err(TensorError::contract("concat", "inputs must be 2-D"));
            }
            let keep = 1 - axis;
            let mut total = 0;
            for &i in &ids {
                let s = &nodes[i].shape;
                if s.len() != 2 || s[keep] != first[keep] {
                    return Err(TensorError::shape("concat", first, s));
                }
                total += s[axis];
            }
            if axis == 0 {
                let mut value = Vec::with_capacity(total * first[1]);
                for &i in &ids {
                    value.extend_from_slice(&nodes[i].value);
                }
                (vec![total, first[1]], value)
            } else {
                let rows = first[0];
                let mut value = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &i in &ids {
                        let c = nodes[i].shape[1];
                        value.extend_from_slice(&nodes[i].value[r * c..(r + 1) * c]);
                    }
                }
                (vec![rows, total], value)
            }
        };
        let rg = self.rg(&ids);
        Ok(self.push(shape, value, Op::Concat { inputs: ids, axis }, rg, None))
    }

    /// Gradient of the scalar `loss` with respect to every node that tracks
    /// gradients. The tape is left intact, so `backward` may be called again.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.shape),
            ));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes[..n]
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (p, i)))
            .collect();
        let shapes = nodes[..n].iter().map(|nd| nd.shape.clone()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            accumulate(grads, nodes, a, |da| {
                kernels::matmul_grad_a(g, &nodes[b].value, da, m, k, n)
            });
            accumulate(grads, nodes, b, |db| {
                kernels::matmul_grad_b(&nodes[a].value, g, db, m, k, n)
            });
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |d| add_into(d, g));
            accumulate(grads, nodes, b, |d| add_into(d, g));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |d| add_into(d, g));
            accumulate(grads, nodes, b, |d| {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x -= gv;
                }
            });
        }
        &Op::Mul(a, b) => {
            accumulate(grads, nodes, a, |d| {
                for ((x, &gv), &bv) in d.iter_mut().zip(g).zip(&nodes[b].value) {
                    *x += gv * bv;
                }
            });
            accumulate(grads, nodes, b, |d| {
                for ((x, &gv), &av) in d.iter_mut().zip(g).zip(&nodes[a].value) {
                    *x += gv * av;
                }
            });
        }
        &Op::AddRow(x, b) => {
            accumulate(grads, nodes, x, |d| add_into(d, g));
            let n = nodes[b].value.len();
            accumulate(grads, nodes, b, |d| {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        &Op::Scale(x, c) => {
            accumulate(grads, nodes, x, |d| kernels::axpy(c, g, d));
        }
        &Op::MulScalar(x, s) => {
            let sv = nodes[s].value[0];
            accumulate(grads, nodes, x, |d| kernels::axpy(sv, g, d));
            accumulate(grads, nodes, s, |d| d[0] += kernels::dot(g, &nodes[x].value));
        }
        &Op::DivScalar(x, s) => {
            let sv = nodes[s].value[0];
            accumulate(grads, nodes, x, |d| kernels::axpy(sv.recip(), g, d));
            accumulate(grads, nodes, s, |d| {
                d[0] -= kernels::dot(g, &nodes[x].value) / (sv * sv)
            });
        }
        &Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, len, inner) = kernels::axis_split(&node.shape, axis);
            accumulate(grads, nodes, x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += y[idx(j)] * g[idx(j)];
                        }
                        for j in 0..len {
                            d[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            });
        }
        &Op::MaskedSoftmax { x } => {
            let y = &node.value;
            let cols = node.shape[1];
            accumulate(grads, nodes, x, |d| {
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let s = kernels::dot(yr, gr);
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let dim = nodes[*gamma].value.len();
            let gm = &nodes[*gamma].value;
            accumulate(grads, nodes, *gamma, |d| {
                for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                    for j in 0..dim {
                        d[j] += gr[j] * xr[j];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |d| {
                for gr in g.chunks(dim) {
                    add_into(d, gr);
                }
            });
            accumulate(grads, nodes, *x, |d| {
                let inv_n = T::one() / T::of(dim as f64);
                let mut dxhat = vec![T::zero(); dim];
                for (r, ((gr, xr), dr)) in g
                    .chunks(dim)
                    .zip(xhat.chunks(dim))
                    .zip(d.chunks_mut(dim))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..dim {
                        dxhat[j] = gr[j] * gm[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for j in 0..dim {
                        dr[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            });
        }
        &Op::Gelu(x) => {
            let xs = &nodes[x].value;
            let k = T::of(GELU_K);
            let c = T::of(GELU_C);
            let half = T::of(0.5);
            let three = T::of(3.0);
            accumulate(grads, nodes, x, |d| {
                for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xs) {
                    let u = k * (xv + c * xv * xv * xv);
                    let t = u.tanh();
                    let du = k * (T::one() + three * c * xv * xv);
                    let deriv = half * (T::one() + t) + half * xv * (T::one() - t * t) * du;
                    *dv += gv * deriv;
                }
            });
        }
        &Op::Sigmoid(x) => {
            let y = &node.value;
            accumulate(grads, nodes, x, |d| {
                for ((dv, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * yv * (T::one() - yv);
                }
            });
        }
        Op::Embedding { table, ids } => {
            let dim = nodes[*table].shape[1];
            accumulate(grads, nodes, *table, |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            let total_cols = node.shape[1];
            for &inp in inputs {
                let s = nodes[inp].shape.clone();
                if *axis == 0 {
                    let len = s[0] * s[1];
                    let start = offset;
                    accumulate(grads, nodes, inp, |d| add_into(d, &g[start..start + len]));
                    offset += len;
                } else {
                    let start = offset;
                    accumulate(grads, nodes, inp, |d| {
                        for r in 0..s[0] {
                            let src = &g[r * total_cols + start..r * total_cols + start + s[1]];
                            add_into(&mut d[r * s[1]..(r + 1) * s[1]], src);
                        }
                    });
                    offset += s[1];
                }
            }
        }
        &Op::Slice { x, axis, start } => {
            let src_cols = nodes[x].shape[1];
            let (rows, cols) = (node.shape[0], node.shape[1]);
            accumulate(grads, nodes, x, |d| {
                if axis == 0 {
                    add_into(&mut d[start * src_cols..(start + rows) * src_cols], g);
                } else {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * src_cols + start..r * src_cols + start + cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
            });
        }
        &Op::Transpose(x) => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            accumulate(grads, nodes, x, |d| {
                let gt = kernels::transpose(g, rows, cols);
                add_into(d, &gt);
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            denom,
        } => {
            let vocab = nodes[*logits].shape[1];
            let g0 = g[0];
            accumulate(grads, nodes, *logits, |d| {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let scale = g0 * w / *denom;
                    let pr = &probs[r * vocab..(r + 1) * vocab];
                    let dr = &mut d[r * vocab..(r + 1) * vocab];
                    kernels::axpy(scale, pr, dr);
                    dr[t] -= scale;
                }
            });
        }
        Op::BceWithLogits { logits, labels } => {
            let z = &nodes[*logits].value;
            let m = T::of(labels.len() as f64);
            let g0 = g[0];
            accumulate(grads, nodes, *logits, |d| {
                for ((dv, &zv), &y) in d.iter_mut().zip(z).zip(labels) {
                    *dv += g0 * (sigmoid(zv) - y) / m;
                }
            });
        }
        Op::L2Normalize { x, norms } => {
            let y = &node.value;
            let cols = *node.shape.last().unwrap();
            accumulate(grads, nodes, *x, |d| {
                for (r, ((yr, gr), dr)) in y
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(d.chunks_mut(cols))
                    .enumerate()
                {
                    let s = kernels::dot(yr, gr);
                    let inv = norms[r].recip();
                    for j in 0..cols {
                        dr[j] += (gr[j] - s * yr[j]) * inv;
                    }
                }
            });
        }
        &Op::Sum(x) => {
            let g0 = g[0];
            accumulate(grads, nodes, x, |d| d.iter_mut().for_each(|v| *v += g0));
        }
        &Op::Mean(x) => {
            let g0 = g[0] / T::of(nodes[x].value.len() as f64);
            accumulate(grads, nodes, x, |d| d.iter_mut().for_each(|v| *v += g0));
        }
        &Op::Clamp { x, lo, hi } => {
            let xs = &nodes[x].value;
            accumulate(grads, nodes, x, |d| {
                for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xs) {
                    if xv >= lo && xv <= hi {
                        *dv += gv;
                    }
                }
            });
        }
        &Op::Reshape(x) => {
            accumulate(grads, nodes, x, |d| add_into(d, g));
        }
    }
}

#[inline]
fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (x, &v) in d.iter_mut().zip(g) {
        *x += v;
    }
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, or `None` if it does not track gradients or the
    /// loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Tensor::new(&self.shapes[var.id], g.clone()).ok()
    }

    /// `(parameter index, gradient)` for every bound parameter reached.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_deref().map(|g| (p, g)))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> Result<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if n.value.len() != 1 {
            return Err(TensorError::contract(
                "item",
                format!("expected one element, shape {:?}", n.shape),
            ));
        }
        Ok(n.value[0])
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        let rg = self.tape.rg(inputs);
        self.tape.push(shape, value, op, rg, None)
    }

    fn unary_map(&self, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
    }

    /// Matrix product of two 2-D vars.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::shape("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (vec![m, n], kernels::matmul(&a.value, &b.value, m, k, n))
        };
        Ok(self.push(shape, value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn zip_same(&self, other: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(TensorError::shape(op, &a.shape, &b.shape));
        }
        Ok((
            a.shape.clone(),
            a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.push(shape, value, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.push(shape, value, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.push(shape, value, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_row(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            let n = *a.shape.last().unwrap_or(&0);
            if b.value.len() != n || n == 0 {
                return Err(TensorError::shape("add_row", &a.shape, &b.shape));
            }
            let mut v = a.value.clone();
            for row in v.chunks_mut(n) {
                add_into(row, &b.value);
            }
            (a.shape.clone(), v)
        };
        Ok(self.push(shape, value, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let (shape, value) = self.unary_map(|x| x * c);
        self.push(shape, value, Op::Scale(self.id, c), &[self.id])
    }

    fn scalar_op(&self, s: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[s.id]);
        if b.value.len() != 1 {
            return Err(TensorError::shape(op, &a.shape, &b.shape));
        }
        let sv = b.value[0];
        Ok((a.shape.clone(), a.value.iter().map(|&x| f(x, sv)).collect()))
    }

    /// Multiplies every element by the one-element var `s`.
    pub fn mul_scalar(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.scalar_op(s, "mul_scalar", |x, s| x * s)?;
        Ok(self.push(shape, value, Op::MulScalar(self.id, s.id), &[self.id, s.id]))
    }

    /// Divides every element by the one-element var `s`.
    pub fn div_scalar(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, value) = self.scalar_op(s, "div_scalar", |x, s| x / s)?;
        Ok(self.push(shape, value, Op::DivScalar(self.id, s.id), &[self.id, s.id]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axis >= n.shape.len() {
                return Err(TensorError::contract(
                    "softmax",
                    format!("axis {axis} out of range for shape {:?}", n.shape),
                ));
            }
            if !n.value.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let (outer, len, inner) = kernels::axis_split(&n.shape, axis);
            let mut out = vec![T::zero(); n.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        mx = mx.max(n.value[idx(j)]);
                    }
                    let mut sum = T::zero();
                    for j in 0..len {
                        let e = (n.value[idx(j)] - mx).exp();
                        out[idx(j)] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= sum;
                    }
                }
            }
            (n.shape.clone(), out)
        };
        Ok(self.push(shape, value, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    /// Row-wise softmax of a 2-D var restricted to entries where `visible`
    /// is true. Hidden entries get exactly zero weight and do not influence
    /// the visible ones. A row with no visible entry is all zeros.
    pub fn masked_softmax(&self, visible: &[bool]) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 || visible.len() != n.value.len() {
                return Err(TensorError::shape("masked_softmax", &n.shape, &[visible.len()]));
            }
            let cols = n.shape[1];
            let mut out = vec![T::zero(); n.value.len()];
            for ((xr, mr), or) in n.value.chunks(cols).zip(visible.chunks(cols)).zip(out.chunks_mut(cols)) {
                let mut mx = T::neg_infinity();
                for (x, &m) in xr.iter().zip(mr) {
                    if m {
                        if !x.is_finite() {
                            return Err(TensorError::NonFinite { op: "masked_softmax" });
                        }
                        mx = mx.max(*x);
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..cols {
                    if mr[j] {
                        let e = (xr[j] - mx).exp();
                        or[j] = e;
                        sum += e;
                    }
                }
                for o in or.iter_mut() {
                    *o /= sum;
                }
            }
            (n.shape.clone(), out)
        };
        Ok(self.push(shape, value, Op::MaskedSoftmax { x: self.id }, &[self.id]))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (shape, value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let dim = *n.shape.last().unwrap_or(&0);
            let (gm, bt) = (&nodes[gamma.id], &nodes[beta.id]);
            if dim == 0 || gm.value.len() != dim || bt.value.len() != dim {
                return Err(TensorError::shape("layer_norm", &n.shape, &gm.shape));
            }
            let inv_n = T::one() / T::of(dim as f64);
            let eps = T::of(eps);
            let rows = n.value.len() / dim;
            let mut out = vec![T::zero(); n.value.len()];
            let mut xhat = vec![T::zero(); n.value.len()];
            let mut rstd = vec![T::zero(); rows];
            for r in 0..rows {
                let xr = &n.value[r * dim..(r + 1) * dim];
                let mean = xr.iter().copied().sum::<T>() * inv_n;
                let var = xr.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_n;
                let rs = (var + eps).sqrt().recip();
                rstd[r] = rs;
                for j in 0..dim {
                    let h = (xr[j] - mean) * rs;
                    xhat[r * dim + j] = h;
                    out[r * dim + j] = h * gm.value[j] + bt.value[j];
                }
            }
            (n.shape.clone(), out, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.push(shape, value, op, &[self.id, gamma.id, beta.id]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        let k = T::of(GELU_K);
        let c = T::of(GELU_C);
        let half = T::of(0.5);
        let (shape, value) = self.unary_map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(shape, value, Op::Gelu(self.id), &[self.id])
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let (shape, value) = self.unary_map(sigmoid);
        self.push(shape, value, Op::Sigmoid(self.id), &[self.id])
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id];
            if t.shape.len() != 2 {
                return Err(TensorError::contract("embedding", "table must be 2-D"));
            }
            let (rows, dim) = (t.shape[0], t.shape[1]);
            let mut v = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::contract(
                        "embedding",
                        format!("id {id} out of range for table of {rows} rows"),
                    ));
                }
                v.extend_from_slice(&t.value[id * dim..(id + 1) * dim]);
            }
            (vec![ids.len(), dim], v)
        };
        let op = Op::Embedding {
            table: self.id,
            ids: ids.to_vec(),
        };
        Ok(self.push(shape, value, op, &[self.id]))
    }

    /// `len` rows (axis 0) or columns (axis 1) of a 2-D var starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 || axis > 1 || start + len > n.shape[axis] || len == 0 {
                return Err(TensorError::contract(
                    "slice",
                    format!("cannot take {len} from {start} on axis {axis} of {:?}", n.shape),
                ));
            }
            let cols = n.shape[1];
            if axis == 0 {
                (vec![len, cols], n.value[start * cols..(start + len) * cols].to_vec())
            } else {
                let rows = n.shape[0];
                let mut v = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    v.extend_from_slice(&n.value[r * cols + start..r * cols + start + len]);
                }
                (vec![rows, len], v)
            }
        };
        Ok(self.push(shape, value, Op::Slice { x: self.id, axis, start }, &[self.id]))
    }

    /// Single row `i` as a `[1, cols]` var.
    pub fn row(&self, i: usize) -> Result<Var<'t, T>> {
        self.slice(0, i, 1)
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 {
                return Err(TensorError::contract("transpose", "input must be 2-D"));
            }
            let (r, c) = (n.shape[0], n.shape[1]);
            (vec![c, r], kernels::transpose(&n.value, r, c))
        };
        Ok(self.push(shape, value, Op::Transpose(self.id), &[self.id]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[rows, classes]` logits, weighted by `weights` (0 excludes a row).
    /// The sum is normalized by the total weight.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[T]) -> Result<Var<'t, T>> {
        let (loss, probs, denom) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 || targets.len() != n.shape[0] || weights.len() != n.shape[0] {
                return Err(TensorError::shape("cross_entropy", &n.shape, &[targets.len()]));
            }
            let classes = n.shape[1];
            let denom: T = weights.iter().copied().sum();
            if denom <= T::zero() {
                return Err(TensorError::contract("cross_entropy", "all rows are masked out"));
            }
            let mut probs = vec![T::zero(); n.value.len()];
            let mut loss = T::zero();
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if t >= classes {
                    return Err(TensorError::contract(
                        "cross_entropy",
                        format!("target {t} out of range for {classes} classes"),
                    ));
                }
                let xr = &n.value[r * classes..(r + 1) * classes];
                let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                let pr = &mut probs[r * classes..(r + 1) * classes];
                for (p, &x) in pr.iter_mut().zip(xr) {
                    *p = (x - mx).exp();
                    sum += *p;
                }
                for p in pr.iter_mut() {
                    *p /= sum;
                }
                if w != T::zero() {
                    let log_p = xr[t] - mx - sum.ln();
                    loss -= w * log_p;
                }
            }
            (loss / denom, probs, denom)
        };
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
            denom,
        };
        Ok(self.push(vec![1], vec![loss], op, &[self.id]))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `labels`,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&self, labels: &[T]) -> Result<Var<'t, T>> {
        let loss = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if labels.is_empty() || labels.len() != n.value.len() {
                return Err(TensorError::shape("bce_with_logits", &n.shape, &[labels.len()]));
            }
            let mut s = T::zero();
            for (&z, &y) in n.value.iter().zip(labels) {
                s += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
            }
            s / T::of(labels.len() as f64)
        };
        let op = Op::BceWithLogits {
            logits: self.id,
            labels: labels.to_vec(),
        };
        Ok(self.push(vec![1], vec![loss], op, &[self.id]))
    }

    /// Scales each row (last axis) to unit L2 norm, dividing by
    /// `sqrt(|x|^2 + eps)` so a zero row maps to zero instead of NaN.
    pub fn l2_normalize(&self, eps: f64) -> Var<'t, T> {
        let (shape, value, norms) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let cols = *n.shape.last().unwrap_or(&1);
            let eps = T::of(eps);
            let mut out = n.value.clone();
            let mut norms = Vec::with_capacity(n.value.len() / cols.max(1));
            for row in out.chunks_mut(cols) {
                let nrm = (kernels::dot(row, row) + eps).sqrt();
                norms.push(nrm);
                row.iter_mut().for_each(|x| *x /= nrm);
            }
            (n.shape.clone(), out, norms)
        };
        self.push(shape, value, Op::L2Normalize { x: self.id, norms }, &[self.id])
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.to_vec().into_iter().sum();
        self.push(vec![1], vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.to_vec();
        let s = v.iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        self.push(vec![1], vec![s], Op::Mean(self.id), &[self.id])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        let (shape, value) = self.unary_map(|x| x.max(lo).min(hi));
        self.push(shape, value, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if numel(shape) != n.value.len() {
                return Err(TensorError::shape("reshape", &n.shape, shape));
            }
            n.value.clone()
        };
        Ok(self.push(shape.to_vec(), value, Op::Reshape(self.id), &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(eye.matmul(a).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.matmul(b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        match a.matmul(b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2], &[0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        let x = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.softmax(0).unwrap().to_vec();
        // exp(k) / (e + e^2 + e^3), evaluated independently
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, v) in y.iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
        assert!((y[0] - 0.0900).abs() < 1e-4);
        assert!((y[1] - 0.2447).abs() < 1e-4);
        assert!((y[2] - 0.6652).abs() < 1e-4);
        let x = tape.constant(&t(&[2], &[1000.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(x.softmax(0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_requires_grad(true));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[4], &[0.3, -1.0, 2.0, 0.5]).with_requires_grad(true));
        let y = x.softmax(0).unwrap().sum();
        let g = tape.backward(y).unwrap().get(x).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::Contract { op: "backward", .. })
        ));
    }

    #[test]
    fn masked_softmax_ignores_hidden_entries() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[1, 3], &[1.0, 2.0, 50.0]));
        let b = tape.constant(&t(&[1, 3], &[1.0, 2.0, -7.0]));
        let m = [true, true, false];
        let ya = a.masked_softmax(&m).unwrap().to_vec();
        let yb = b.masked_softmax(&m).unwrap().to_vec();
        assert_eq!(ya, yb);
        assert_eq!(ya[2], 0.0);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 0.5, 0.25]));
        let g = tape.constant(&Tensor::ones(&[4]));
        let b = tape.constant(&Tensor::zeros(&[4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().to_vec();
        for row in y.chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(&t(&[1], &[2.0]).with_requires_grad(true));
        assert!(!x.requires_grad());
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn rewind_truncates() {
        let tape = Tape::<f64>::new();
        let _x = tape.constant(&t(&[1], &[2.0]));
        let mark = tape.mark();
        let _y = tape.constant(&t(&[1], &[3.0]));
        assert_eq!(tape.len(), 2);
        tape.rewind(mark);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn cross_entropy_counts_only_weighted_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[3, 100]));
        let loss = x.cross_entropy(&[1, 2, 3], &[1.0, 1.0, 0.0]).unwrap();
        assert!((loss.item().unwrap() - 100f64.ln()).abs() < 1e-12);
        assert!(x.cross_entropy(&[0, 0, 0], &[0.0, 0.0, 0.0]).is_err());
    }
}
