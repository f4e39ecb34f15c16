//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards from
//! the loss is a valid reverse topological traversal and visits each node once.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::array::{Array, Precision};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Max(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sum { src: usize, axis: Option<usize> },
    Mean { src: usize, axis: Option<usize> },
    Broadcast(usize),
    Slice { src: usize, axis: usize, start: usize },
    Concat { srcs: Vec<usize>, axis: usize },
    Gather { src: usize, axis: usize, indices: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max(..) => "max",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Broadcast(_) => "broadcast",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    /// Leaf registered as a differentiable input.
    requires_grad: bool,
    /// Some ancestor (or the node itself) requires a gradient.
    tracked: bool,
}

/// Single-writer recording of a forward computation.
pub struct Tape {
    id: u64,
    precision: Precision,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::global())
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    by_leaf: HashMap<usize, Array>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        if var.tape != self.tape {
            return None;
        }
        self.by_leaf.get(&var.idx)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id
    }

    fn check(&self, v: Var) -> usize {
        assert!(
            v.tape == self.id,
            "variable recorded on tape {} used with tape {}",
            v.tape,
            self.id
        );
        v.idx
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            tracked,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn tracked(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].tracked
    }

    /// Registers an input. Values are rounded to the tape precision.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var {
        let value = value.rounded(self.precision);
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    pub fn param(&self, value: Array) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    pub fn value(&self, v: Var) -> Array {
        let i = self.check(v);
        self.nodes.borrow()[i].value.clone()
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Array) -> T) -> T {
        let i = self.check(v);
        f(&self.nodes.borrow()[i].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |a| a.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> f64 {
        self.with_value(v, |a| a.item())
    }

    /// Fails with [`Error::NonFinite`] if any entry of `v` is NaN or infinite.
    pub fn ensure_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.with_value(v, Array::all_finite) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[ia].value, &nodes[ib].value);
            assert!(
                x.rank() == 2 && y.rank() == 2 && x.shape()[1] == y.shape()[0],
                "matmul shapes {:?} x {:?}",
                x.shape(),
                y.shape()
            );
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, x.data(), (k, 1), y.data(), (n, 1), &mut out);
            self.precision.round_slice(&mut out);
            Array::new(vec![m, n], out).expect("matmul output")
        };
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.push(value, Op::MatMul(ia, ib), false, tracked)
    }

    fn binary(&self, a: Var, b: Var, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[ia].value, &nodes[ib].value);
            let p = self.precision;
            if x.shape() == y.shape() {
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&u, &v)| p.round(f(u, v)))
                    .collect();
                Array::new(x.shape().to_vec(), data).expect("binary output")
            } else {
                let shape = broadcast_shape(x.shape(), y.shape()).unwrap_or_else(|| {
                    panic!("cannot broadcast {:?} with {:?}", x.shape(), y.shape())
                });
                let ma = index_map(&shape, x.shape());
                let mb = index_map(&shape, y.shape());
                let (xd, yd) = (x.data(), y.data());
                let data = ma
                    .iter()
                    .zip(&mb)
                    .map(|(&i, &j)| p.round(f(xd[i], yd[j])))
                    .collect();
                Array::new(shape, data).expect("binary output")
            }
        };
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.push(value, op(ia, ib), false, tracked)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    /// Elementwise maximum. Ties route the gradient to `a`.
    pub fn max(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Max, |x, y| if x >= y { x } else { y })
    }

    fn unary(&self, a: Var, op: fn(usize) -> Op, f: fn(f64) -> f64) -> Var {
        let ia = self.check(a);
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[ia].value;
            let p = self.precision;
            let data = x.data().iter().map(|&u| p.round(f(u))).collect();
            Array::new(x.shape().to_vec(), data).expect("unary output")
        };
        let tracked = self.tracked(ia);
        self.push(value, op(ia), false, tracked)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus, softplus)
    }

    /// Sum over all entries (scalar result) or along `axis` keeping the axis.
    pub fn sum(&self, a: Var, axis: Option<usize>) -> Var {
        let ia = self.check(a);
        let value = self.with_value(a, |x| reduce_sum(x, axis, self.precision));
        let tracked = self.tracked(ia);
        self.push(value, Op::Sum { src: ia, axis }, false, tracked)
    }

    pub fn mean(&self, a: Var, axis: Option<usize>) -> Var {
        let ia = self.check(a);
        let value = self.with_value(a, |x| {
            let count = reduce_count(x.shape(), axis) as f64;
            let mut s = reduce_sum(x, axis, Precision::F64);
            for v in s.data_mut() {
                *v = self.precision.round(*v / count);
            }
            s
        });
        let tracked = self.tracked(ia);
        self.push(value, Op::Mean { src: ia, axis }, false, tracked)
    }

    pub fn broadcast(&self, a: Var, shape: &[usize]) -> Var {
        let ia = self.check(a);
        let value = self.with_value(a, |x| {
            let target = broadcast_shape(x.shape(), shape)
                .filter(|s| s.as_slice() == shape)
                .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", x.shape()));
            let map = index_map(&target, x.shape());
            let data = map.iter().map(|&i| x.data()[i]).collect();
            Array::new(target, data).expect("broadcast output")
        });
        let tracked = self.tracked(ia);
        self.push(value, Op::Broadcast(ia), false, tracked)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let ia = self.check(a);
        let value = self.with_value(a, |x| {
            let shape = x.shape();
            assert!(axis < shape.len() && start <= end && end <= shape[axis], "slice {start}..{end} on axis {axis} of {shape:?}");
            let (outer, len, inner) = split_axis(shape, axis);
            let w = end - start;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = w;
            Array::new(out_shape, data).expect("slice output")
        });
        let tracked = self.tracked(ia);
        self.push(value, Op::Slice { src: ia, axis, start }, false, tracked)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let idxs: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[idxs[0]].value.shape().to_vec();
            assert!(axis < first.len(), "concat axis {axis} on {first:?}");
            let mut total = 0;
            for &i in &idxs {
                let s = nodes[i].value.shape();
                let same = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
                assert!(same, "concat shapes {first:?} and {s:?}");
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &i in &idxs {
                    let x = &nodes[i].value;
                    let len = x.shape()[axis];
                    data.extend_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Array::new(shape, data).expect("concat output")
        };
        let tracked = idxs.iter().any(|&i| self.tracked(i));
        self.push(value, Op::Concat { srcs: idxs, axis }, false, tracked)
    }

    /// Selects entries along `axis` by index; indices may repeat.
    pub fn gather(&self, a: Var, axis: usize, indices: &[usize]) -> Var {
        let ia = self.check(a);
        let value = self.with_value(a, |x| {
            let shape = x.shape();
            assert!(axis < shape.len(), "gather axis {axis} on {shape:?}");
            let (outer, len, inner) = split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &k in indices {
                    assert!(k < len, "gather index {k} out of range {len}");
                    let base = (o * len + k) * inner;
                    data.extend_from_slice(&x.data()[base..base + inner]);
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = indices.len();
            Array::new(out_shape, data).expect("gather output")
        });
        let tracked = self.tracked(ia);
        self.push(
            value,
            Op::Gather {
                src: ia,
                axis,
                indices: indices.to_vec(),
            },
            false,
            tracked,
        )
    }

    // ---- compositions -----------------------------------------------------

    pub fn neg(&self, a: Var) -> Var {
        let m = self.scalar(-1.0);
        self.mul(a, m)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `log(sigmoid(a))` computed as `-softplus(-a)`.
    pub fn log_sigmoid(&self, a: Var) -> Var {
        let n = self.neg(a);
        let sp = self.softplus(n);
        self.neg(sp)
    }

    /// Clamps into `[lo, hi]` through two elementwise maxima.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let lo_v = self.scalar(lo);
        let low = self.max(a, lo_v);
        let neg = self.neg(low);
        let neg_hi = self.scalar(-hi);
        let capped = self.max(neg, neg_hi);
        self.neg(capped)
    }

    /// Numerically stable `log(mean(exp(a), axis))` along `axis` of a rank-2
    /// array, keeping the axis. The shift is a constant, so gradients are exact.
    pub fn log_mean_exp(&self, a: Var, axis: usize) -> Var {
        let shift = self.with_value(a, |x| reduce_max(x, axis));
        let shift = self.constant(shift);
        let centered = self.sub(a, shift);
        let e = self.exp(centered);
        let m = self.mean(e, Some(axis));
        let l = self.log(m);
        self.add(l, shift)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Exact reverse-mode gradients of the scalar `loss` with respect to every
    /// leaf registered with `requires_grad`. Leaves that do not participate
    /// receive exact zeros. The tape is left untouched, so repeated calls give
    /// identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id {
            return Err(Error::Detached);
        }
        let nodes = self.nodes.borrow();
        let root = loss.idx;
        if root >= nodes.len() {
            return Err(Error::Detached);
        }
        if nodes[root].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[root].value.shape().to_vec()));
        }
        let p = self.precision;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        let mut by_leaf = HashMap::new();
        if nodes[root].tracked {
            grads[root] = Some(vec![1.0]);
        }

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("backward through {}", node.op.name())));
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        by_leaf.insert(i, Array::new(node.value.shape().to_vec(), g).expect("grad"));
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, w) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                    if nodes[*a].tracked {
                        // dX = G W^T
                        let mut dx = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n, 1), w.data(), (1, n), &mut dx);
                        p.round_slice(&mut dx);
                        accumulate(&mut grads, *a, dx);
                    }
                    if nodes[*b].tracked {
                        // dW = X^T G
                        let mut dw = vec![0.0; k * n];
                        gemm(k, m, n, x.data(), (1, k), &g, (n, 1), &mut dw);
                        p.round_slice(&mut dw);
                        accumulate(&mut grads, *b, dw);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Max(a, b) => {
                    let (xa, xb) = (&nodes[*a].value, &nodes[*b].value);
                    let out_shape = node.value.shape();
                    let ma = index_map(out_shape, xa.shape());
                    let mb = index_map(out_shape, xb.shape());
                    let (ad, bd) = (xa.data(), xb.data());
                    let op = &node.op;
                    if nodes[*a].tracked {
                        let mut da = vec![0.0; xa.len()];
                        for (o, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                            let d = match op {
                                Op::Add(..) | Op::Sub(..) => g[o],
                                Op::Mul(..) => g[o] * bd[ib],
                                Op::Div(..) => g[o] / bd[ib],
                                Op::Max(..) => {
                                    if ad[ia] >= bd[ib] {
                                        g[o]
                                    } else {
                                        0.0
                                    }
                                }
                                _ => unreachable!(),
                            };
                            da[ia] += d;
                        }
                        p.round_slice(&mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if nodes[*b].tracked {
                        let mut db = vec![0.0; xb.len()];
                        for (o, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                            let d = match op {
                                Op::Add(..) => g[o],
                                Op::Sub(..) => -g[o],
                                Op::Mul(..) => g[o] * ad[ia],
                                Op::Div(..) => -g[o] * y[o] / bd[ib],
                                Op::Max(..) => {
                                    if ad[ia] >= bd[ib] {
                                        0.0
                                    } else {
                                        g[o]
                                    }
                                }
                                _ => unreachable!(),
                            };
                            db[ib] += d;
                        }
                        p.round_slice(&mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Exp(a) | Op::Log(a) | Op::Tanh(a) | Op::Sigmoid(a) | Op::Softplus(a) => {
                    if nodes[*a].tracked {
                        let x = nodes[*a].value.data();
                        let d: Vec<f64> = (0..g.len())
                            .map(|o| {
                                let local = match node.op {
                                    Op::Exp(_) => y[o],
                                    Op::Log(_) => 1.0 / x[o],
                                    Op::Tanh(_) => 1.0 - y[o] * y[o],
                                    Op::Sigmoid(_) => y[o] * (1.0 - y[o]),
                                    Op::Softplus(_) => sigmoid(x[o]),
                                    _ => unreachable!(),
                                };
                                p.round(g[o] * local)
                            })
                            .collect();
                        accumulate(&mut grads, *a, d);
                    }
                }
                Op::Sum { src, axis } | Op::Mean { src, axis } => {
                    if nodes[*src].tracked {
                        let x = &nodes[*src].value;
                        let scale = match node.op {
                            Op::Mean { .. } => 1.0 / reduce_count(x.shape(), *axis) as f64,
                            _ => 1.0,
                        };
                        let d = match axis {
                            None => vec![p.round(g[0] * scale); x.len()],
                            Some(ax) => {
                                let (outer, len, inner) = split_axis(x.shape(), *ax);
                                let mut d = vec![0.0; x.len()];
                                for o in 0..outer {
                                    for l in 0..len {
                                        for k in 0..inner {
                                            d[(o * len + l) * inner + k] = p.round(g[o * inner + k] * scale);
                                        }
                                    }
                                }
                                d
                            }
                        };
                        accumulate(&mut grads, *src, d);
                    }
                }
                Op::Broadcast(src) => {
                    if nodes[*src].tracked {
                        let x = &nodes[*src].value;
                        let map = index_map(node.value.shape(), x.shape());
                        let mut d = vec![0.0; x.len()];
                        for (o, &i) in map.iter().enumerate() {
                            d[i] += g[o];
                        }
                        p.round_slice(&mut d);
                        accumulate(&mut grads, *src, d);
                    }
                }
                Op::Slice { src, axis, start } => {
                    if nodes[*src].tracked {
                        let x = &nodes[*src].value;
                        let (outer, len, inner) = split_axis(x.shape(), *axis);
                        let w = node.value.shape()[*axis];
                        let mut d = vec![0.0; x.len()];
                        for o in 0..outer {
                            let dst = o * len * inner + start * inner;
                            d[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                        }
                        accumulate(&mut grads, *src, d);
                    }
                }
                Op::Concat { srcs, axis } => {
                    let out_shape = node.value.shape();
                    let (outer, total, inner) = split_axis(out_shape, *axis);
                    let mut offset = 0;
                    for &s in srcs {
                        let len = nodes[s].value.shape()[*axis];
                        if nodes[s].tracked {
                            let mut d = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                d.extend_from_slice(&g[base..base + len * inner]);
                            }
                            accumulate(&mut grads, s, d);
                        }
                        offset += len;
                    }
                }
                Op::Gather { src, axis, indices } => {
                    if nodes[*src].tracked {
                        let x = &nodes[*src].value;
                        let (outer, len, inner) = split_axis(x.shape(), *axis);
                        let mut d = vec![0.0; x.len()];
                        for o in 0..outer {
                            for (r, &k) in indices.iter().enumerate() {
                                let from = (o * indices.len() + r) * inner;
                                let to = (o * len + k) * inner;
                                for c in 0..inner {
                                    d[to + c] += g[from + c];
                                }
                            }
                        }
                        p.round_slice(&mut d);
                        accumulate(&mut grads, *src, d);
                    }
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && !by_leaf.contains_key(&i) {
                by_leaf.insert(i, Array::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            by_leaf,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: Vec<f64>) {
    match &mut grads[idx] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
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

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major general matrix product `c = a * b` with explicit (row, col)
/// strides for `a` and `b`, which makes transposed operands free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let a_last = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
        let b_last = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
        assert!(a_last < a.len() && b_last < b.len(), "gemm operand bounds");
    }
    // SAFETY: every index reachable through the given dimensions and strides
    // was bounds-checked above, and `c` is exactly m*n contiguous row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn index_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    if src.iter().product::<usize>() == 1 {
        return vec![0; n];
    }
    let rank = out.len();
    let pad = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for k in (0..src.len()).rev() {
        if src[k] != 1 {
            strides[k + pad] = acc;
        }
        acc *= src[k];
    }
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for k in (0..rank).rev() {
            counter[k] += 1;
            cur += strides[k];
            if counter[k] < out[k] {
                break;
            }
            cur -= strides[k] * out[k];
            counter[k] = 0;
        }
    }
    map
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_count(shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => shape.iter().product(),
        Some(ax) => shape[ax],
    }
}

fn reduce_sum(x: &Array, axis: Option<usize>, p: Precision) -> Array {
    match axis {
        None => Array::scalar(p.round(x.data().iter().sum())),
        Some(ax) => {
            let shape = x.shape();
            assert!(ax < shape.len(), "sum axis {ax} on {shape:?}");
            let (outer, len, inner) = split_axis(shape, ax);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let row = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            p.round_slice(&mut out);
            let mut s = shape.to_vec();
            s[ax] = 1;
            Array::new(s, out).expect("sum output")
        }
    }
}

fn reduce_max(x: &Array, axis: usize) -> Array {
    let shape = x.shape();
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for k in 0..inner {
                let v = x.data()[(o * len + l) * inner + k];
                let slot = &mut out[o * inner + k];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    for v in &mut out {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    let mut s = shape.to_vec();
    s[axis] = 1;
    Array::new(s, out).expect("max output")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape {
        Tape::new(Precision::F64)
    }

    #[test]
    fn quadratic_gradient() {
        let t = tape();
        let w = t.param(Array::row(vec![1.0, 2.0]));
        let sq = t.mul(w, w);
        let loss = t.sum(sq, None);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn exp_gradient_at_zero() {
        let t = tape();
        let w = t.param(Array::row(vec![0.0]));
        let e = t.exp(w);
        let loss = t.sum(e, None);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let t = tape();
        let w = t.param(Array::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_variable_is_detached() {
        let t1 = tape();
        let t2 = tape();
        let w = t1.param(Array::scalar(1.0));
        let loss = t1.sum(w, None);
        assert!(matches!(t2.backward(loss), Err(Error::Detached)));
    }

    #[test]
    fn nan_in_backward_is_an_error() {
        let t = tape();
        let w = t.param(Array::row(vec![0.0]));
        let l = t.log(w); // -inf, derivative inf
        let loss = t.sum(l, None);
        let zero = t.mul_scalar(loss, 0.0);
        assert!(matches!(t.backward(zero), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let t = tape();
        let w = t.param(Array::row(vec![3.0]));
        let unused = t.param(Array::row(vec![1.0, 1.0]));
        let loss = t.sum(w, None);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_sum_has_zero_gradient_where_masked() {
        let t = tape();
        let x = t.param(Array::row(vec![0.3, -1.2, 2.0, 0.7]));
        let m = t.constant(Array::row(vec![1.0, 0.0, 1.0, 0.0]));
        let e = t.exp(x);
        let masked = t.mul(e, m);
        let loss = t.sum(masked, None);
        let g = t.backward(loss).unwrap();
        let d = g.get(x).unwrap().data().to_vec();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        assert!(d[0] > 0.0 && d[2] > 0.0);
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let t = tape();
        let x = t.constant(Array::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.param(Array::row(vec![0.0, 0.0, 0.0]));
        let y = t.add(x, b);
        let loss = t.sum(y, None);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_concat_gather_shapes() {
        let t = tape();
        let x = t.constant(Array::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = t.slice(x, 1, 1, 3);
        assert_eq!(t.value(s).data(), &[2., 3., 5., 6.]);
        let c = t.concat(&[x, s], 1);
        assert_eq!(t.shape(c), vec![2, 5]);
        let gth = t.gather(x, 0, &[1, 1, 0]);
        assert_eq!(t.value(gth).data(), &[4., 5., 6., 4., 5., 6., 1., 2., 3.]);
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let t = tape();
        let w = t.param(Array::row(vec![0.1, -0.7, 1.3]));
        let a = t.tanh(w);
        let b = t.softplus(a);
        let c = t.mul(b, w);
        let loss = t.mean(c, None);
        let g1 = t.backward(loss).unwrap();
        let g2 = t.backward(loss).unwrap();
        let (a1, a2) = (g1.get(w).unwrap(), g2.get(w).unwrap());
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn log_mean_exp_matches_naive() {
        let t = tape();
        let x = t.constant(Array::matrix(1, 3, vec![-1.0, 0.5, 2.0]).unwrap());
        let l = t.log_mean_exp(x, 1);
        let naive = (((-1.0f64).exp() + 0.5f64.exp() + 2.0f64.exp()) / 3.0).ln();
        assert!((t.item(l) - naive).abs() < 1e-12);
    }

    #[test]
    fn clamp_limits_values() {
        let t = tape();
        let x = t.constant(Array::row(vec![-20.0, 0.5, 15.0]));
        let c = t.clamp(x, -10.0, 10.0);
        assert_eq!(t.value(c).data(), &[-10.0, 0.5, 10.0]);
    }
}
