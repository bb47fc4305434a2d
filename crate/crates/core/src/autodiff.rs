//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are only ever
//! appended, so append order is a topological order and [`Tape::backward`]
//! is a single reverse sweep. A fresh tape is built per training step.
//!
//! Broadcasting is limited to adding a trailing vector (`add_row`) and the
//! affine part of `layer_norm`; every other shape mismatch is an error.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{axis_split, matmul_acc, matmul_nt_acc, matmul_tn_acc, transpose_raw, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LogSumExp { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    MaxAxis { x: usize, axis: usize, argmax: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize },
    NormalizeRows { x: usize, norms: Vec<T> },
    PickPerRow { x: usize, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads[v.id].as_ref()
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &e)| e)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, numel: usize) -> &mut Vec<T> {
    dst.get_or_insert_with(|| vec![T::zero(); numel])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        v.id
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Constant };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, id }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Trainable input; `backward` reports its gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        let id = self.check(v);
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let id = self.check(v);
        self.nodes.borrow()[id].requires_grad
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            if va.shape() != vb.shape() {
                return Err(Error::shape(op, va.shape(), vb.shape()));
            }
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, mk(ia, ib), rg))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, mk: impl FnOnce(usize) -> Op<T>) -> Var {
        let ix = self.check(x);
        let value = self.nodes.borrow()[ix].value.map(f);
        let rg = self.rg(&[ix]);
        self.push(value, mk(ix), rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `x[.., j] + bias[j]`: the one permitted broadcast.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x), self.check(bias));
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vb) = (&nodes[ix].value, &nodes[ib].value);
            let w = vx.width();
            if vb.numel() != w || vb.ndim() != 1 {
                return Err(Error::shape("add_row", vx.shape(), vb.shape()));
            }
            let b = vb.data();
            let data = vx
                .data()
                .chunks(w)
                .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
                .collect();
            Tensor::from_parts(vx.shape().to_vec(), data)
        };
        let rg = self.rg(&[ix, ib]);
        Ok(self.push(value, Op::AddRow(ix, ib), rg))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.matmul(&nodes[ib].value)?
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[1] {
                return Err(Error::shape("matmul_nt", va.shape(), vb.shape()));
            }
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
            let mut out = vec![T::zero(); m * n];
            matmul_nt_acc(va.data(), vb.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, Op::MatMulNt(ia, ib), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let ix = self.check(x);
        let value = self.nodes.borrow()[ix].value.transpose()?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Transpose(ix), rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x);
        let value = self.nodes.borrow()[ix].value.reshape(shape)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    fn check_axis(&self, op: &'static str, ix: usize, axis: usize) -> Result<Vec<usize>> {
        let shape = self.nodes.borrow()[ix].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.check_axis("softmax", ix, axis)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[ix].value.data();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut out = vec![T::zero(); xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| o * len * inner + l * inner + i;
                    let mx = (0..len).map(|l| xd[at(l)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for l in 0..len {
                        let e = (xd[at(l)] - mx).exp();
                        out[at(l)] = e;
                        z = z + e;
                    }
                    for l in 0..len {
                        out[at(l)] = out[at(l)] / z;
                    }
                }
            }
            Tensor::from_parts(shape, out)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Softmax { x: ix, axis }, rg))
    }

    fn lse_along(xd: &[T], shape: &[usize], axis: usize) -> Vec<T> {
        let (outer, len, inner) = axis_split(shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mx = (0..len).map(|l| xd[at(l)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (xd[at(l)] - mx).exp()).sum();
                out[o * inner + i] = mx + s.ln();
            }
        }
        out
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.check_axis("log_softmax", ix, axis)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[ix].value.data();
            let lse = Self::lse_along(xd, &shape, axis);
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut out = xd.to_vec();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let k = o * len * inner + l * inner + i;
                        out[k] = out[k] - lse[o * inner + i];
                    }
                }
            }
            Tensor::from_parts(shape, out)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::LogSoftmax { x: ix, axis }, rg))
    }

    /// `log Σ exp(x)` along `axis`; the axis is removed from the shape.
    pub fn logsumexp(&self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.check_axis("logsumexp", ix, axis)?;
        let value = {
            let nodes = self.nodes.borrow();
            let out = Self::lse_along(nodes[ix].value.data(), &shape, axis);
            Tensor::from_parts(reduced_shape(&shape, axis), out)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::LogSumExp { x: ix, axis }, rg))
    }

    /// Normalises each vector along the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x), self.check(gain), self.check(bias));
        if !(eps >= 0.0) {
            return Err(Error::invalid("layer_norm", format!("eps must be non-negative, got {eps}")));
        }
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (vx, vg, vb) = (&nodes[ix].value, &nodes[ig].value, &nodes[ib].value);
            let d = vx.width();
            if vg.shape() != [d] || vb.shape() != [d] {
                return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
            }
            let n = T::of(d as f64);
            let eps = T::of(eps);
            let mut out = Vec::with_capacity(vx.numel());
            let mut xhat = Vec::with_capacity(vx.numel());
            let mut rstd = Vec::with_capacity(vx.numel() / d);
            for row in vx.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * vg.data()[j] + vb.data()[j]);
                }
            }
            (Tensor::from_parts(vx.shape().to_vec(), out), xhat, rstd)
        };
        let rg = self.rg(&[ix, ig, ib]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let ix = self.check(x);
        let s = self.nodes.borrow()[ix].value.data().iter().copied().sum();
        let rg = self.rg(&[ix]);
        self.push(Tensor::scalar(s), Op::Sum(ix), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let ix = self.check(x);
        let m = {
            let nodes = self.nodes.borrow();
            let d = nodes[ix].value.data();
            d.iter().copied().sum::<T>() / T::of(d.len() as f64)
        };
        let rg = self.rg(&[ix]);
        self.push(Tensor::scalar(m), Op::Mean(ix), rg)
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.check_axis(op, ix, axis)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[ix].value.data();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + xd[o * len * inner + l * inner + i];
                    }
                }
            }
            if mean {
                let n = T::of(len as f64);
                out.iter_mut().for_each(|v| *v = *v / n);
            }
            Tensor::from_parts(reduced_shape(&shape, axis), out)
        };
        let rg = self.rg(&[ix]);
        let op = if mean {
            Op::MeanAxis { x: ix, axis }
        } else {
            Op::SumAxis { x: ix, axis }
        };
        Ok(self.push(value, op, rg))
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    /// Maximum along `axis`; the gradient routes to the first maximiser.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x);
        let shape = self.check_axis("max_axis", ix, axis)?;
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[ix].value.data();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut out = vec![T::zero(); outer * inner];
            let mut argmax = vec![0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for l in 1..len {
                        if xd[o * len * inner + l * inner + i] > xd[o * len * inner + best * inner + i] {
                            best = l;
                        }
                    }
                    out[o * inner + i] = xd[o * len * inner + best * inner + i];
                    argmax[o * inner + i] = best;
                }
            }
            (Tensor::from_parts(reduced_shape(&shape, axis), out), argmax)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::MaxAxis { x: ix, axis, argmax }, rg))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let ids: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[ids[0]].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for &i in &ids {
                let s = nodes[i].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &first, s));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&first, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &i in &ids {
                    let v = &nodes[i].value;
                    let chunk = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, out)
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, rg))
    }

    /// Selects rows (first-axis slices) by index; repeated indices allowed.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.check(x);
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            let n = v.rows();
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::invalid("gather_rows", format!("index {bad} out of range for {n} rows")));
            }
            let mut shape = v.shape().to_vec();
            shape[0] = idx.len();
            let data = idx.iter().flat_map(|&i| v.row(i).iter().copied()).collect();
            Tensor::from_parts(shape, data)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::GatherRows { x: ix, idx: idx.to_vec() }, rg))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            if v.rows() != idx.len() {
                return Err(Error::invalid(
                    "scatter_rows",
                    format!("{} rows but {} indices", v.rows(), idx.len()),
                ));
            }
            let mut seen = vec![false; rows];
            for &i in idx {
                if i >= rows || seen[i] {
                    return Err(Error::invalid("scatter_rows", format!("bad or repeated index {i}")));
                }
                seen[i] = true;
            }
            let w = v.numel() / v.rows();
            let mut out = vec![T::zero(); rows * w];
            for (r, &i) in idx.iter().enumerate() {
                out[i * w..(i + 1) * w].copy_from_slice(v.row(r));
            }
            let mut shape = v.shape().to_vec();
            shape[0] = rows;
            Tensor::from_parts(shape, out)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::ScatterRows { x: ix, idx: idx.to_vec() }, rg))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            if v.ndim() != 2 || len == 0 || start + len > v.shape()[1] {
                return Err(Error::invalid(
                    "slice_cols",
                    format!("columns {start}..{} of {:?}", start + len, v.shape()),
                ));
            }
            let data = v
                .data()
                .chunks(v.shape()[1])
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            Tensor::from_parts(vec![v.rows(), len], data)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::SliceCols { x: ix, start }, rg))
    }

    /// Scales each vector along the last axis to unit L2 norm
    /// (`x / sqrt(|x|² + eps)`).
    pub fn normalize_rows(&self, x: Var, eps: f64) -> Var {
        let ix = self.check(x);
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            let w = v.width();
            let eps = T::of(eps);
            let mut norms = Vec::with_capacity(v.numel() / w);
            let mut out = Vec::with_capacity(v.numel());
            for row in v.data().chunks(w) {
                let n = (row.iter().map(|&a| a * a).sum::<T>() + eps).sqrt();
                norms.push(n);
                out.extend(row.iter().map(|&a| a / n));
            }
            (Tensor::from_parts(v.shape().to_vec(), out), norms)
        };
        let rg = self.rg(&[ix]);
        self.push(value, Op::NormalizeRows { x: ix, norms }, rg)
    }

    /// `out[i] = x[i, idx[i]]` for a rank-2 `x`.
    pub fn pick_per_row(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.check(x);
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ix].value;
            if v.ndim() != 2 || v.rows() != idx.len() {
                return Err(Error::invalid("pick_per_row", format!("{} indices for {:?}", idx.len(), v.shape())));
            }
            let c = v.shape()[1];
            if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
                return Err(Error::invalid("pick_per_row", format!("column {bad} out of range for {c}")));
            }
            let data = idx.iter().enumerate().map(|(i, &j)| v.at2(i, j)).collect();
            Tensor::from_parts(vec![idx.len()], data)
        };
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::PickPerRow { x: ix, idx: idx.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`, visiting each node once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id {
            return Err(Error::Tape("loss is not on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::Tape("loss is not on this tape".into()));
        }
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            let val = |i: usize| nodes[i].value.data();
            let numel = |i: usize| nodes[i].value.numel();
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    if needs(*a) {
                        let ga = add_into(&mut grads[*a], g.len());
                        ga.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + s);
                    }
                    if needs(*b) {
                        let gb = add_into(&mut grads[*b], g.len());
                        gb.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + sign * s);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga = add_into(&mut grads[*a], g.len());
                        for k in 0..g.len() {
                            ga[k] = ga[k] + g[k] * vb[k];
                        }
                    }
                    if needs(*b) {
                        let gb = add_into(&mut grads[*b], g.len());
                        for k in 0..g.len() {
                            gb[k] = gb[k] + g[k] * va[k];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga = add_into(&mut grads[*a], g.len());
                        for k in 0..g.len() {
                            ga[k] = ga[k] + g[k] / vb[k];
                        }
                    }
                    if needs(*b) {
                        let gb = add_into(&mut grads[*b], g.len());
                        for k in 0..g.len() {
                            gb[k] = gb[k] - g[k] * va[k] / (vb[k] * vb[k]);
                        }
                    }
                }
                Op::AddRow(x, b) => {
                    if needs(*x) {
                        let gx = add_into(&mut grads[*x], g.len());
                        gx.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + s);
                    }
                    if needs(*b) {
                        let w = numel(*b);
                        let gb = add_into(&mut grads[*b], w);
                        for row in g.chunks(w) {
                            gb.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let gx = add_into(&mut grads[*x], g.len());
                    gx.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + s * *c);
                }
                Op::Exp(x) => {
                    let gx = add_into(&mut grads[*x], g.len());
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] * y[k];
                    }
                }
                Op::Log(x) => {
                    let vx = val(*x);
                    let gx = add_into(&mut grads[*x], g.len());
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] / vx[k];
                    }
                }
                Op::Gelu(x) => {
                    let vx = val(*x);
                    let gx = add_into(&mut grads[*x], g.len());
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] * gelu_grad(vx[k]);
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if needs(*a) {
                        let ga = add_into(&mut grads[*a], m * k);
                        matmul_nt_acc(&g, val(*b), ga, m, n, k);
                    }
                    if needs(*b) {
                        let gb = add_into(&mut grads[*b], k * n);
                        matmul_tn_acc(val(*a), &g, gb, m, k, n);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[0]);
                    if needs(*a) {
                        let ga = add_into(&mut grads[*a], m * k);
                        matmul_acc(&g, val(*b), ga, m, n, k);
                    }
                    if needs(*b) {
                        let gb = add_into(&mut grads[*b], n * k);
                        matmul_tn_acc(&g, val(*a), gb, m, n, k);
                    }
                }
                Op::Transpose(x) => {
                    let s = node.value.shape();
                    let t = transpose_raw(&g, s[0], s[1]);
                    let gx = add_into(&mut grads[*x], g.len());
                    gx.iter_mut().zip(&t).for_each(|(d, &s)| *d = *d + s);
                }
                Op::Reshape(x) => {
                    let gx = add_into(&mut grads[*x], g.len());
                    gx.iter_mut().zip(&g).for_each(|(d, &s)| *d = *d + s);
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let gx = add_into(&mut grads[*x], g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] = gx[at(l)] + y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let gx = add_into(&mut grads[*x], g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let total: T = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] = gx[at(l)] + g[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                }
                Op::LogSumExp { x, axis } => {
                    let shape = nodes[*x].value.shape();
                    let (outer, len, inner) = axis_split(shape, *axis);
                    let vx = val(*x);
                    let gx = add_into(&mut grads[*x], outer * len * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for l in 0..len {
                                let k = o * len * inner + l * inner + i;
                                gx[k] = gx[k] + g[r] * (vx[k] - y[r]).exp();
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let d = numel(*gain);
                    let gv = val(*gain);
                    if needs(*gain) {
                        let gg = add_into(&mut grads[*gain], d);
                        for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] = gg[j] + row[j] * hrow[j];
                            }
                        }
                    }
                    if needs(*bias) {
                        let gb = add_into(&mut grads[*bias], d);
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(a, &s)| *a = *a + s);
                        }
                    }
                    if needs(*x) {
                        let n = T::of(d as f64);
                        let gx = add_into(&mut grads[*x], g.len());
                        for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dh = row[j] * gv[j];
                                m1 = m1 + dh;
                                m2 = m2 + dh * hrow[j];
                            }
                            m1 = m1 / n;
                            m2 = m2 / n;
                            for j in 0..d {
                                let dh = row[j] * gv[j];
                                gx[r * d + j] = gx[r * d + j] + rstd[r] * (dh - m1 - hrow[j] * m2);
                            }
                        }
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    let n = numel(*x);
                    let s = if matches!(node.op, Op::Mean(_)) { g[0] / T::of(n as f64) } else { g[0] };
                    let gx = add_into(&mut grads[*x], n);
                    gx.iter_mut().for_each(|d| *d = *d + s);
                }
                Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                    let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
                    let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                        T::one() / T::of(len as f64)
                    } else {
                        T::one()
                    };
                    let gx = add_into(&mut grads[*x], outer * len * inner);
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let k = o * len * inner + l * inner + i;
                                gx[k] = gx[k] + g[o * inner + i] * scale;
                            }
                        }
                    }
                }
                Op::MaxAxis { x, axis, argmax } => {
                    let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
                    let gx = add_into(&mut grads[*x], outer * len * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            let k = o * len * inner + argmax[r] * inner + i;
                            gx[k] = gx[k] + g[r];
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                    let mut offset = 0;
                    let row_len = node.value.numel() / outer;
                    for &p in parts {
                        let chunk = nodes[p].value.shape()[*axis] * inner;
                        if needs(p) {
                            let gp = add_into(&mut grads[p], outer * chunk);
                            for o in 0..outer {
                                let src = &g[o * row_len + offset..o * row_len + offset + chunk];
                                gp[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, &s)| *d = *d + s);
                            }
                        }
                        offset += chunk;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let n = numel(*x);
                    let w = g.len() / idx.len();
                    let gx = add_into(&mut grads[*x], n);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..w {
                            gx[i * w + c] = gx[i * w + c] + g[r * w + c];
                        }
                    }
                }
                Op::ScatterRows { x, idx } => {
                    let n = numel(*x);
                    let w = n / idx.len();
                    let gx = add_into(&mut grads[*x], n);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..w {
                            gx[r * w + c] = gx[r * w + c] + g[i * w + c];
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let cols = nodes[*x].value.shape()[1];
                    let len = node.value.shape()[1];
                    let gx = add_into(&mut grads[*x], numel(*x));
                    for (r, row) in g.chunks(len).enumerate() {
                        for (c, &s) in row.iter().enumerate() {
                            let k = r * cols + start + c;
                            gx[k] = gx[k] + s;
                        }
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let w = node.value.width();
                    let gx = add_into(&mut grads[*x], g.len());
                    for (r, (grow, yrow)) in g.chunks(w).zip(y.chunks(w)).enumerate() {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for c in 0..w {
                            gx[r * w + c] = gx[r * w + c] + (grow[c] - yrow[c] * dot) / norms[r];
                        }
                    }
                }
                Op::PickPerRow { x, idx } => {
                    let cols = nodes[*x].value.shape()[1];
                    let gx = add_into(&mut grads[*x], numel(*x));
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * cols + j] = gx[i * cols + j] + g[i];
                    }
                }
            }
        }

        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&shapes)
            .enumerate()
            .map(|(i, (g, s))| match (&nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(s.clone(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}
