//! Reverse-mode differentiation over whole-tensor primitives.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together with
//! its output value. [`Tape::backward`] walks the record once in reverse and
//! accumulates adjoints; [`Tape::replay`] re-runs the record forward (optionally
//! with substituted leaf values) through the same kernels, which is what the
//! finite-difference checks in this crate are built on.

use super::tensor::{gemm, Layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sin,
    Square,
    Exp,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sin => x.sin(),
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sin => x.cos(),
            Unary::Square => 2.0 * x,
            Unary::Exp => x.exp(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x[..., k] · wᵀ` with `w: [n, k]`.
    Linear(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Sum(Var, Vec<bool>),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Slice {
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Gather {
        a: Var,
        axis: usize,
        index: Vec<usize>,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Linear(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _) | Op::Unary(a, _) | Op::Sum(a, _) | Op::Softmax(a) | Op::Permute(a, _) | Op::Reshape(a) => {
                vec![*a]
            }
            Op::Slice { a, .. } | Op::Gather { a, .. } => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    shape_hint: Vec<usize>,
    value: Tensor,
}

/// Single-writer record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape_hint: shape,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let inputs: Vec<&Tensor> = op.inputs().iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &inputs, None)?
        };
        self.nodes.push(Node {
            shape_hint: value.shape().to_vec(),
            op,
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// Applies `w: [n, k]` along the last axis of `x: [..., k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.record(Op::Linear(x, w))
    }

    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.record(Op::BatchMatMul { a, b, transpose_b })
    }

    /// Elementwise sum with size-1 broadcasting (operands of equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        self.record(Op::Unary(a, f))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    /// Sums over the listed axes, keeping them as extent-1 axes.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut mask = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::dims("sum_axes", self.shape(a), &[ax]));
            }
            mask[ax] = true;
        }
        self.record(Op::Sum(a, mask))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        let s = self.record(Op::Sum(a, vec![true; rank]))?;
        self.reshape(s, &[])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice { a, axis, start, len })
    }

    /// `out[.., i, ..] = a[.., index[i], ..]` along `axis`.
    pub fn gather(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var> {
        self.record(Op::Gather {
            a,
            axis,
            index: index.to_vec(),
        })
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.record(Op::Permute(a, axes.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::dims("reshape", self.shape(a), shape));
        }
        let value = self.value(a).clone().reshape(shape)?;
        self.nodes.push(Node {
            op: Op::Reshape(a),
            shape_hint: shape.to_vec(),
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Recomputes every node in recording order. `overrides` replace leaf values.
    pub fn replay(&self, overrides: &[(Var, Tensor)]) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => overrides
                    .iter()
                    .rev()
                    .find(|(var, _)| var.0 == id)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
                op => {
                    let inputs: Vec<&Tensor> = op.inputs().iter().map(|v| &values[v.0]).collect();
                    eval(op, &inputs, Some(&node.shape_hint))?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Propagates `seed` (the adjoint of `output`) back to every node.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::dims("backward seed", seed.shape(), self.shape(output)));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    Layout::row_major(n),
                    bv.data(),
                    Layout::transposed(n),
                    &mut da,
                    false,
                );
                let mut db = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    av.data(),
                    Layout::transposed(k),
                    g.data(),
                    Layout::row_major(n),
                    &mut db,
                    false,
                );
                accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (val(x), val(w));
                let (n, k) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / k;
                let mut dx = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    Layout::row_major(n),
                    wv.data(),
                    Layout::row_major(k),
                    &mut dx,
                    false,
                );
                let mut dw = vec![0.0; n * k];
                gemm(
                    n,
                    m,
                    k,
                    g.data(),
                    Layout::transposed(n),
                    xv.data(),
                    Layout::row_major(k),
                    &mut dw,
                    false,
                );
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                accumulate(grads, *w, Tensor::new(vec![n, k], dw)?);
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (val(a), val(b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bv.len()];
                for t in 0..bs {
                    let ga = &g.data()[t * m * n..(t + 1) * m * n];
                    let aa = &av.data()[t * m * k..(t + 1) * m * k];
                    let bb = &bv.data()[t * k * n..(t + 1) * k * n];
                    let da_t = &mut da[t * m * k..(t + 1) * m * k];
                    let db_t = &mut db[t * k * n..(t + 1) * k * n];
                    if *transpose_b {
                        // C = A Bᵀ, B: [n, k]
                        gemm(m, n, k, ga, Layout::row_major(n), bb, Layout::row_major(k), da_t, false);
                        gemm(
                            n,
                            m,
                            k,
                            ga,
                            Layout::transposed(n),
                            aa,
                            Layout::row_major(k),
                            db_t,
                            false,
                        );
                    } else {
                        // C = A B, B: [k, n]
                        gemm(
                            m,
                            n,
                            k,
                            ga,
                            Layout::row_major(n),
                            bb,
                            Layout::transposed(n),
                            da_t,
                            false,
                        );
                        gemm(
                            k,
                            m,
                            n,
                            aa,
                            Layout::transposed(k),
                            ga,
                            Layout::row_major(n),
                            db_t,
                            false,
                        );
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, reduce_to(g, val(a).shape()));
                accumulate(grads, *b, reduce_to(g, val(b).shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let ga = broadcast_binary(g, bv, |x, y| x * y)?;
                let gb = broadcast_binary(g, av, |x, y| x * y)?;
                accumulate(grads, *a, reduce_to(&ga, av.shape()));
                accumulate(grads, *b, reduce_to(&gb, bv.shape()));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
            Op::Unary(a, f) => {
                let av = val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gi, xi)| gi * f.derivative(*xi))
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::Sum(a, _) => {
                let av = val(a);
                let zero = Tensor::zeros(av.shape());
                accumulate(grads, *a, broadcast_binary(&zero, g, |_, y| y)?);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut da = vec![0.0; out.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = val(p).shape()[*axis];
                    accumulate(grads, *p, slice_axis(g, *axis, start, len)?);
                    start += len;
                }
            }
            Op::Slice { a, axis, start, len } => {
                let av = val(a);
                let (outer, extent, inner) = split_axis(av.shape(), *axis);
                let mut da = vec![0.0; av.len()];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let dst_off = o * extent * inner + start * inner;
                    da[dst_off..dst_off + len * inner].copy_from_slice(src);
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::Gather { a, axis, index } => {
                let av = val(a);
                let (outer, extent, inner) = split_axis(av.shape(), *axis);
                let m = index.len();
                let mut da = vec![0.0; av.len()];
                for o in 0..outer {
                    for (i, &src_i) in index.iter().enumerate() {
                        let s = &g.data()[(o * m + i) * inner..(o * m + i + 1) * inner];
                        let d = &mut da[(o * extent + src_i) * inner..(o * extent + src_i + 1) * inner];
                        for (x, y) in d.iter_mut().zip(s) {
                            *x += y;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                accumulate(grads, *a, permute_axes(g, &inv)?);
            }
            Op::Reshape(a) => {
                let shape = val(a).shape().to_vec();
                accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn eval(op: &Op, inputs: &[&Tensor], shape_hint: Option<&[usize]>) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(..) => super::tensor::matmul(inputs[0], inputs[1]),
        Op::Linear(..) => {
            let (x, w) = (inputs[0], inputs[1]);
            let k = *x.shape().last().unwrap_or(&0);
            if w.rank() != 2 || x.rank() == 0 || w.shape()[1] != k {
                return Err(Error::dims("linear", x.shape(), w.shape()));
            }
            let n = w.shape()[0];
            let m = x.len() / k.max(1);
            let mut y = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                x.data(),
                Layout::row_major(k),
                w.data(),
                Layout::transposed(k),
                &mut y,
                false,
            );
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, y)
        }
        Op::BatchMatMul { transpose_b, .. } => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
                return Err(Error::dims("bmm", a.shape(), b.shape()));
            }
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (kb, n) = if *transpose_b {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if kb != k {
                return Err(Error::dims("bmm", a.shape(), b.shape()));
            }
            let mut c = vec![0.0; bs * m * n];
            let lb = if *transpose_b {
                Layout::transposed(k)
            } else {
                Layout::row_major(n)
            };
            for t in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[t * m * k..(t + 1) * m * k],
                    Layout::row_major(k),
                    &b.data()[t * k * n..(t + 1) * k * n],
                    lb,
                    &mut c[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
            Tensor::new(vec![bs, m, n], c)
        }
        Op::Add(..) => broadcast_binary(inputs[0], inputs[1], |x, y| x + y),
        Op::Mul(..) => broadcast_binary(inputs[0], inputs[1], |x, y| x * y),
        Op::Scale(_, c) => Ok(inputs[0].map(|x| x * c)),
        Op::Unary(_, f) => Ok(inputs[0].map(|x| f.apply(x))),
        Op::Sum(_, mask) => Ok(sum_masked(inputs[0], mask)),
        Op::Softmax(_) => {
            let a = inputs[0];
            let n = *a.shape().last().unwrap_or(&1);
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            Tensor::new(a.shape().to_vec(), out)
        }
        Op::Concat(_, axis) => concat_axis(inputs, *axis),
        Op::Slice { axis, start, len, .. } => slice_axis(inputs[0], *axis, *start, *len),
        Op::Gather { axis, index, .. } => {
            let a = inputs[0];
            if *axis >= a.rank() {
                return Err(Error::dims("gather", a.shape(), &[*axis]));
            }
            let (outer, extent, inner) = split_axis(a.shape(), *axis);
            if let Some(&bad) = index.iter().find(|&&i| i >= extent) {
                return Err(Error::dims("gather", a.shape(), &[bad]));
            }
            let m = index.len();
            let mut out = Vec::with_capacity(outer * m * inner);
            for o in 0..outer {
                for &i in index {
                    out.extend_from_slice(&a.data()[(o * extent + i) * inner..(o * extent + i + 1) * inner]);
                }
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = m;
            Tensor::new(shape, out)
        }
        Op::Permute(_, axes) => permute_axes(inputs[0], axes),
        Op::Reshape(_) => inputs[0]
            .clone()
            .reshape(shape_hint.expect("reshape replays with its recorded shape")),
    }
}

/// `(outer, extent, inner)` element counts around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slice_axis(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.rank() || start + len > a.shape()[axis] {
        return Err(Error::dims("slice", a.shape(), &[axis, start, len]));
    }
    let (outer, extent, inner) = split_axis(a.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let off = o * extent * inner + start * inner;
        out.extend_from_slice(&a.data()[off..off + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

fn concat_axis(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::dims("concat", first.shape(), &[axis]));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(Error::dims("concat", first.shape(), p.shape()));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let e = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

fn permute_axes(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = a.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&x| x >= r || std::mem::replace(&mut seen[x], true)) {
        return Err(Error::dims("permute", a.shape(), axes));
    }
    let in_strides = strides(a.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = vec![0.0; a.len()];
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for o in out.iter_mut() {
        *o = a.data()[off];
        for d in (0..r).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Merges adjacent axes that are contiguous (or broadcast) in both operands.
fn coalesce(out: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut o, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..out.len() {
        if out[d] == 1 {
            continue;
        }
        if let (Some(&lo), Some(&la), Some(&lb)) = (o.last(), a.last(), b.last()) {
            if la == sa[d] * out[d] && lb == sb[d] * out[d] {
                let k = o.len() - 1;
                o[k] = lo * out[d];
                a[k] = sa[d];
                b[k] = sb[d];
                continue;
            }
        }
        o.push(out[d]);
        a.push(sa[d]);
        b.push(sb[d]);
    }
    if o.is_empty() {
        return (vec![1], vec![0], vec![0]);
    }
    (o, a, b)
}

/// Visits the output in runs along the innermost (coalesced) axis. `f` gets the
/// run start in the output, the matching offsets into both operands, the run
/// length, and the operands' inner strides.
fn for_each_run(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    if out.contains(&0) {
        return;
    }
    let (out, sa, sb) = coalesce(out, sa, sb);
    let r = out.len();
    let total: usize = out.iter().product();
    let inner = out[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        f(o, oa, ob, inner, ia, ib);
        o += inner;
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dims("broadcast", a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_run(&out, &sa, &sb, |o, i, j, len, ia, ib| {
        let dst = &mut data[o..o + len];
        match (ia, ib) {
            (1, 1) => {
                for ((d, x), y) in dst.iter_mut().zip(&ad[i..i + len]).zip(&bd[j..j + len]) {
                    *d = f(*x, *y);
                }
            }
            (1, 0) => {
                let y = bd[j];
                for (d, x) in dst.iter_mut().zip(&ad[i..i + len]) {
                    *d = f(*x, y);
                }
            }
            (0, 1) => {
                let x = ad[i];
                for (d, y) in dst.iter_mut().zip(&bd[j..j + len]) {
                    *d = f(x, *y);
                }
            }
            _ => {
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[i + t * ia], bd[j + t * ib]);
                }
            }
        }
    });
    Tensor::new(out, data)
}

/// Sums `g` down to `shape` over the axes where `shape` has extent 1.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mask: Vec<bool> = shape.iter().zip(g.shape()).map(|(&s, &o)| s == 1 && o != 1).collect();
    sum_masked(g, &mask)
}

fn sum_masked(a: &Tensor, mask: &[bool]) -> Tensor {
    let out_shape: Vec<usize> = a
        .shape()
        .iter()
        .zip(mask)
        .map(|(&d, &m)| if m { 1 } else { d })
        .collect();
    let st = strides(&out_shape);
    let so: Vec<usize> = st.iter().zip(mask).map(|(&s, &m)| if m { 0 } else { s }).collect();
    let sa = strides(a.shape());
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0; n];
    let ad = a.data();
    for_each_run(a.shape(), &sa, &so, |_, i, j, len, ia, jo| match (ia, jo) {
        (1, 1) => {
            for (d, x) in out[j..j + len].iter_mut().zip(&ad[i..i + len]) {
                *d += x;
            }
        }
        (1, 0) => {
            let mut acc = out[j];
            for x in &ad[i..i + len] {
                acc += x;
            }
            out[j] = acc;
        }
        _ => {
            for t in 0..len {
                out[j + t * jo] += ad[i + t * ia];
            }
        }
    });
    Tensor::new(out_shape, out).expect("consistent shape")
}
