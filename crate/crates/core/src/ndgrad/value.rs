use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::tensor::{gemm, numel, Tensor};

/// A node in a dynamically built reverse-mode differentiation graph.
///
/// Cloning a `Value` clones the handle, not the node. Nodes are immutable once
/// built except for their gradient slot, which [`Value::backward`] accumulates
/// into.
#[derive(Clone)]
pub struct Value(Rc<Node>);

struct Node {
    data: Tensor,
    grad: RefCell<Option<Tensor>>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Neg(Value),
    Scale(Value, f64),
    AddConst(Value),
    Exp(Value),
    Log(Value),
    Tanh(Value),
    Sigmoid(Value),
    LogSigmoid(Value),
    Relu(Value),
    Abs(Value),
    MaxConst(Value, f64),
    Clamp(Value, f64, f64),
    MatMul(Value, Value),
    Transpose(Value),
    Sum(Value),
    SumAxis(Value, usize),
    LogSumExp(Value),
    LogSumExpAxis(Value, usize),
    LogSoftmax(Value),
    Softmax(Value),
    Reshape(Value),
    BroadcastTo(Value),
    Concat(Vec<Value>, usize),
    Gather(Value, Vec<usize>),
    Cumsum(Value),
    StraightThrough(Value),
}

impl Op {
    fn parents(&self) -> Vec<&Value> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | AddConst(a) | Exp(a) | Log(a) | Tanh(a) | Sigmoid(a)
            | LogSigmoid(a) | Relu(a) | Abs(a) | MaxConst(a, _) | Clamp(a, _, _)
            | Transpose(a) | Sum(a) | SumAxis(a, _) | LogSumExp(a) | LogSumExpAxis(a, _)
            | LogSoftmax(a) | Softmax(a) | Reshape(a) | BroadcastTo(a) | Gather(a, _)
            | Cumsum(a) | StraightThrough(a) => vec![a],
            Concat(parts, _) => parts.iter().collect(),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Value")
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor, what: &str) -> Vec<usize> {
    if a.shape() == b.shape() {
        a.shape().to_vec()
    } else if b.is_scalar_like() {
        a.shape().to_vec()
    } else if a.is_scalar_like() {
        b.shape().to_vec()
    } else {
        panic!("{what}: incompatible shapes {:?} and {:?}", a.shape(), b.shape())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = broadcast_shape(a, b, what);
    let n = numel(&shape);
    let (da, db) = (a.data(), b.data());
    let data = match (da.len() == n, db.len() == n) {
        (true, true) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => da.iter().map(|&x| f(x, db[0])).collect(),
        (false, true) => db.iter().map(|&y| f(da[0], y)).collect(),
        (false, false) => vec![f(da[0], db[0]); n],
    };
    Tensor::new(shape, data)
}

/// Sums a gradient down to the (possibly scalar) shape of a broadcast operand.
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.len() == target.len() {
        g.reshaped(target.shape())
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn stable_log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log Σ exp over a slice; −∞ when every entry is −∞ (or the slice is empty).
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn lse_strided(data: &[f64], base: usize, len: usize, stride: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for k in 0..len {
        m = m.max(data[base + k * stride]);
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut s = 0.0;
    for k in 0..len {
        s += (data[base + k * stride] - m).exp();
    }
    m + s.ln()
}

impl Value {
    fn from_op(data: Tensor, op: Op) -> Value {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Value(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            op,
            requires_grad,
        }))
    }

    fn leaf(data: Tensor, requires_grad: bool) -> Value {
        Value(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            op: Op::Leaf,
            requires_grad,
        }))
    }

    /// A trainable leaf.
    pub fn param(data: Tensor) -> Value {
        Value::leaf(data, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(data: Tensor) -> Value {
        Value::leaf(data, false)
    }

    pub fn scalar(x: f64) -> Value {
        Value::constant(Tensor::scalar(x))
    }

    pub fn vector(xs: &[f64]) -> Value {
        Value::constant(Tensor::vector(xs.to_vec()))
    }

    pub fn data(&self) -> &Tensor {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.0.data.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient; zeros until a backward pass reaches this node.
    pub fn grad(&self) -> Tensor {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Value {
        Value::constant(self.0.data.clone())
    }

    pub fn same_node(&self, other: &Value) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Value {
        Value::from_op(self.data().map(f), op)
    }

    pub fn add(&self, other: &Value) -> Value {
        let d = elementwise(self.data(), other.data(), "add", |a, b| a + b);
        Value::from_op(d, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Value) -> Value {
        let d = elementwise(self.data(), other.data(), "sub", |a, b| a - b);
        Value::from_op(d, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Value) -> Value {
        let d = elementwise(self.data(), other.data(), "mul", |a, b| a * b);
        Value::from_op(d, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Value) -> Value {
        let d = elementwise(self.data(), other.data(), "div", |a, b| a / b);
        Value::from_op(d, Op::Div(self.clone(), other.clone()))
    }

    pub fn neg(&self) -> Value {
        self.unary(|x| -x, Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Value {
        self.unary(|x| x * c, Op::Scale(self.clone(), c))
    }

    pub fn add_const(&self, c: f64) -> Value {
        self.unary(|x| x + c, Op::AddConst(self.clone()))
    }

    /// Adds a constant tensor of the same shape (e.g. a −∞ mask).
    pub fn add_tensor(&self, t: &Tensor) -> Value {
        self.add(&Value::constant(t.clone()))
    }

    pub fn exp(&self) -> Value {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Value {
        self.unary(f64::ln, Op::Log(self.clone()))
    }

    pub fn tanh(&self) -> Value {
        self.unary(f64::tanh, Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Value {
        self.unary(sigmoid, Op::Sigmoid(self.clone()))
    }

    /// log σ(x), stable for large |x|.
    pub fn log_sigmoid(&self) -> Value {
        self.unary(|x| -stable_log1p_exp(-x), Op::LogSigmoid(self.clone()))
    }

    pub fn relu(&self) -> Value {
        self.unary(|x| x.max(0.0), Op::Relu(self.clone()))
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self) -> Value {
        self.unary(f64::abs, Op::Abs(self.clone()))
    }

    /// max(x, c) elementwise; at a tie the gradient passes through to `x`.
    pub fn max_const(&self, c: f64) -> Value {
        self.unary(|x| x.max(c), Op::MaxConst(self.clone(), c))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Value {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp(self.clone(), lo, hi))
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(&self, other: &Value) -> Value {
        let (a, b) = (self.data(), other.data());
        assert!(
            a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        Value::from_op(
            Tensor::matrix(m, n, out),
            Op::MatMul(self.clone(), other.clone()),
        )
    }

    pub fn transpose(&self) -> Value {
        let a = self.data();
        assert_eq!(a.rank(), 2, "transpose needs rank 2");
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let t = Tensor::from_fn(&[c, r], |i| a.data()[(i % r) * c + i / r]);
        Value::from_op(t, Op::Transpose(self.clone()))
    }

    pub fn sum(&self) -> Value {
        Value::from_op(Tensor::scalar(self.data().sum()), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Value {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Value {
        let a = self.data();
        let (outer, len, inner) = Tensor::axis_split(a.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += a.data()[base + i];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        Value::from_op(Tensor::new(shape, out), Op::SumAxis(self.clone(), axis))
    }

    /// log Σ exp over every element. All-(−∞) input yields −∞ with zero gradient.
    pub fn logsumexp(&self) -> Value {
        let v = logsumexp_slice(self.data().data());
        Value::from_op(Tensor::scalar(v), Op::LogSumExp(self.clone()))
    }

    /// log Σ exp along `axis`, dropping it from the shape.
    pub fn logsumexp_axis(&self, axis: usize) -> Value {
        let a = self.data();
        let (outer, len, inner) = Tensor::axis_split(a.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                out.push(lse_strided(a.data(), o * len * inner + i, len, inner));
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        Value::from_op(Tensor::new(shape, out), Op::LogSumExpAxis(self.clone(), axis))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Value {
        let a = self.data();
        let c = *a.shape().last().expect("log_softmax of a scalar");
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(c) {
            let z = logsumexp_slice(row);
            for x in row.iter_mut() {
                *x = if *x == f64::NEG_INFINITY { *x } else { *x - z };
            }
        }
        Value::from_op(Tensor::new(a.shape().to_vec(), out), Op::LogSoftmax(self.clone()))
    }

    /// Softmax along the last axis. An all-(−∞) row maps to zeros.
    pub fn softmax(&self) -> Value {
        let a = self.data();
        let c = *a.shape().last().expect("softmax of a scalar");
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(c) {
            let z = logsumexp_slice(row);
            for x in row.iter_mut() {
                *x = if z == f64::NEG_INFINITY { 0.0 } else { (*x - z).exp() };
            }
        }
        Value::from_op(Tensor::new(a.shape().to_vec(), out), Op::Softmax(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Value {
        let t = self.data().clone().reshaped(shape);
        Value::from_op(t, Op::Reshape(self.clone()))
    }

    /// Explicit broadcast: source dims are right-aligned with `shape` and each
    /// must equal the target dim or be 1.
    pub fn broadcast_to(&self, shape: &[usize]) -> Value {
        let src = self.data();
        let map = broadcast_index_map(src.shape(), shape);
        let data = map.iter().map(|&i| src.data()[i]).collect();
        Value::from_op(Tensor::new(shape.to_vec(), data), Op::BroadcastTo(self.clone()))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Value], axis: usize) -> Value {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis];
                data.extend_from_slice(&p.data().data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Value::from_op(Tensor::new(shape, data), Op::Concat(parts.to_vec(), axis))
    }

    /// Stacks one-element values into a vector.
    pub fn stack(parts: &[Value]) -> Value {
        let flat: Vec<Value> = parts.iter().map(|p| p.reshape(&[1])).collect();
        Value::concat(&flat, 0)
    }

    /// Picks elements by flat index into a tensor of `shape`.
    pub fn gather(&self, indices: Vec<usize>, shape: &[usize]) -> Value {
        assert_eq!(numel(shape), indices.len(), "gather shape/index count mismatch");
        let src = self.data().data();
        let data = indices.iter().map(|&i| src[i]).collect();
        Value::from_op(Tensor::new(shape.to_vec(), data), Op::Gather(self.clone(), indices))
    }

    /// The element at flat index `i`, as a scalar.
    pub fn at(&self, i: usize) -> Value {
        self.gather(vec![i], &[])
    }

    /// Selects rows (first-axis slices).
    pub fn rows(&self, rows: &[usize]) -> Value {
        let shape = self.shape();
        let inner = numel(&shape[1..]);
        let mut idx = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            assert!(r < shape[0], "row {r} out of range");
            idx.extend(r * inner..(r + 1) * inner);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        self.gather(idx, &out_shape)
    }

    /// Row `r` with the first axis dropped.
    pub fn row(&self, r: usize) -> Value {
        let inner_shape = self.shape()[1..].to_vec();
        self.rows(&[r]).reshape(&inner_shape)
    }

    /// Inclusive cumulative sum along the first axis.
    pub fn cumsum(&self) -> Value {
        let a = self.data();
        let inner = numel(&a.shape()[1..]);
        let mut out = a.data().to_vec();
        for r in 1..a.shape()[0] {
            for i in 0..inner {
                out[r * inner + i] += out[(r - 1) * inner + i];
            }
        }
        Value::from_op(Tensor::new(a.shape().to_vec(), out), Op::Cumsum(self.clone()))
    }

    /// Forward value `hard`, backward the identity onto `self`.
    pub fn straight_through(&self, hard: Tensor) -> Value {
        assert_eq!(hard.shape(), self.shape(), "straight_through shape mismatch");
        Value::from_op(hard, Op::StraightThrough(self.clone()))
    }

    /// Inner product of two equal-shape values.
    pub fn dot(&self, other: &Value) -> Value {
        self.mul(other).sum()
    }

    /// Runs reverse accumulation from this scalar root. Every reachable
    /// node that requires grad gets ∂root/∂node added to its gradient slot.
    pub fn backward(&self) {
        assert!(
            self.data().is_scalar_like(),
            "backward() needs a scalar root, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }
        let order = topo_order(self);
        let index: HashMap<*const Node, usize> = order
            .iter()
            .enumerate()
            .map(|(i, v)| (Rc::as_ptr(&v.0), i))
            .collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; order.len()];
        grads[order.len() - 1] = Some(Tensor::full(self.shape(), 1.0));

        for i in (0..order.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &order[i];
            let mut push = |parent: &Value, contrib: Tensor| {
                if !parent.requires_grad() {
                    return;
                }
                let j = index[&Rc::as_ptr(&parent.0)];
                match &mut grads[j] {
                    Some(t) => t.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            propagate(node, &g, &mut push);
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
}

fn topo_order(root: &Value) -> Vec<Value> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(Rc::as_ptr(&v.0)) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.0.op.parents() {
            if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// For each element of `target`, the flat index of the source element it
/// reads under right-aligned broadcasting.
fn broadcast_index_map(src: &[usize], target: &[usize]) -> Vec<usize> {
    assert!(src.len() <= target.len(), "broadcast_to cannot drop dims");
    let pad = target.len() - src.len();
    let mut full_src = vec![1; pad];
    full_src.extend_from_slice(src);
    for (s, t) in full_src.iter().zip(target) {
        assert!(*s == *t || *s == 1, "cannot broadcast {src:?} to {target:?}");
    }
    let rank = target.len();
    let mut src_strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if full_src[d] == 1 { 0 } else { acc };
        acc *= full_src[d];
    }
    let n = numel(target);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn propagate(node: &Value, g: &Tensor, push: &mut impl FnMut(&Value, Tensor)) {
    let out = &node.0.data;
    match &node.0.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push(a, reduce_to(g.clone(), a.data()));
            push(b, reduce_to(g.clone(), b.data()));
        }
        Op::Sub(a, b) => {
            push(a, reduce_to(g.clone(), a.data()));
            push(b, reduce_to(g.map(|x| -x), b.data()));
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let ga = elementwise(g, b.data(), "mul-back", |x, y| x * y);
                push(a, reduce_to(ga, a.data()));
            }
            if b.requires_grad() {
                let gb = elementwise(g, a.data(), "mul-back", |x, y| x * y);
                push(b, reduce_to(gb, b.data()));
            }
        }
        Op::Div(a, b) => {
            if a.requires_grad() {
                let ga = elementwise(g, b.data(), "div-back", |x, y| x / y);
                push(a, reduce_to(ga, a.data()));
            }
            if b.requires_grad() {
                // d(a/b)/db = -out / b
                let q = elementwise(out, b.data(), "div-back", |o, y| -o / y);
                let gb = g.zip_map(&q, |x, y| x * y);
                push(b, reduce_to(gb, b.data()));
            }
        }
        Op::Neg(a) => push(a, g.map(|x| -x)),
        Op::Scale(a, c) => push(a, g.map(|x| x * c)),
        Op::AddConst(a) => push(a, g.clone()),
        Op::Exp(a) => push(a, g.zip_map(out, |x, o| x * o)),
        Op::Log(a) => push(a, g.zip_map(a.data(), |x, y| x / y)),
        Op::Tanh(a) => push(a, g.zip_map(out, |x, o| x * (1.0 - o * o))),
        Op::Sigmoid(a) => push(a, g.zip_map(out, |x, o| x * o * (1.0 - o))),
        Op::LogSigmoid(a) => push(a, g.zip_map(a.data(), |x, y| x * sigmoid(-y))),
        Op::Relu(a) => push(a, g.zip_map(a.data(), |x, y| if y > 0.0 { x } else { 0.0 })),
        Op::Abs(a) => push(
            a,
            g.zip_map(a.data(), |x, y| {
                if y > 0.0 {
                    x
                } else if y < 0.0 {
                    -x
                } else {
                    0.0
                }
            }),
        ),
        Op::MaxConst(a, c) => push(a, g.zip_map(a.data(), |x, y| if y >= *c { x } else { 0.0 })),
        Op::Clamp(a, lo, hi) => push(
            a,
            g.zip_map(a.data(), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }),
        ),
        Op::MatMul(a, b) => {
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if a.requires_grad() {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data().data(), true, &mut ga, 0.0);
                push(a, Tensor::matrix(m, k, ga));
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data().data(), true, g.data(), false, &mut gb, 0.0);
                push(b, Tensor::matrix(k, n, gb));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            // g is [c, r]
            let t = Tensor::from_fn(&[r, c], |i| g.data()[(i % c) * r + i / c]);
            push(a, t);
        }
        Op::Sum(a) => push(a, Tensor::full(a.shape(), g.item())),
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = Tensor::axis_split(a.shape(), *axis);
            let t = Tensor::from_fn(a.shape(), |i| {
                let o = i / (len * inner);
                let ii = i % inner;
                g.data()[o * inner + ii]
            });
            let _ = outer;
            push(a, t);
        }
        Op::LogSumExp(a) => {
            let z = out.item();
            let gz = g.item();
            let t = if z == f64::NEG_INFINITY {
                Tensor::zeros(a.shape())
            } else {
                a.data().map(|x| gz * (x - z).exp())
            };
            push(a, t);
        }
        Op::LogSumExpAxis(a, axis) => {
            let (_, len, inner) = Tensor::axis_split(a.shape(), *axis);
            let t = Tensor::from_fn(a.shape(), |i| {
                let o = i / (len * inner);
                let ii = i % inner;
                let z = out.data()[o * inner + ii];
                if z == f64::NEG_INFINITY {
                    0.0
                } else {
                    g.data()[o * inner + ii] * (a.data().data()[i] - z).exp()
                }
            });
            push(a, t);
        }
        Op::LogSoftmax(a) => {
            let c = *a.shape().last().unwrap();
            let mut t = g.data().to_vec();
            for (row, (grow, orow)) in t
                .chunks_mut(c)
                .zip(g.data().chunks(c).zip(out.data().chunks(c)))
            {
                let s: f64 = grow.iter().sum();
                for (x, &o) in row.iter_mut().zip(orow) {
                    *x -= o.exp() * s;
                }
            }
            push(a, Tensor::new(a.shape().to_vec(), t));
        }
        Op::Softmax(a) => {
            let c = *a.shape().last().unwrap();
            let mut t = vec![0.0; out.len()];
            for ((row, grow), orow) in t
                .chunks_mut(c)
                .zip(g.data().chunks(c))
                .zip(out.data().chunks(c))
            {
                let s: f64 = grow.iter().zip(orow).map(|(x, o)| x * o).sum();
                for ((x, &gi), &o) in row.iter_mut().zip(grow).zip(orow) {
                    *x = o * (gi - s);
                }
            }
            push(a, Tensor::new(a.shape().to_vec(), t));
        }
        Op::Reshape(a) => push(a, g.clone().reshaped(a.shape())),
        Op::BroadcastTo(a) => {
            let map = broadcast_index_map(a.shape(), out.shape());
            let mut t = Tensor::zeros(a.shape());
            for (&src, &x) in map.iter().zip(g.data()) {
                t.data_mut()[src] += x;
            }
            push(a, t);
        }
        Op::Concat(parts, axis) => {
            let shape = out.shape();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[*axis + 1..]);
            let total = shape[*axis];
            let mut offset = 0;
            for p in parts {
                let len = p.shape()[*axis];
                if p.requires_grad() {
                    let mut data = Vec::with_capacity(p.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    push(p, Tensor::new(p.shape().to_vec(), data));
                }
                offset += len;
            }
        }
        Op::Gather(a, indices) => {
            let mut t = Tensor::zeros(a.shape());
            for (&i, &x) in indices.iter().zip(g.data()) {
                t.data_mut()[i] += x;
            }
            push(a, t);
        }
        Op::Cumsum(a) => {
            let inner = numel(&a.shape()[1..]);
            let rows = a.shape()[0];
            let mut t = g.data().to_vec();
            for r in (0..rows.saturating_sub(1)).rev() {
                for i in 0..inner {
                    t[r * inner + i] += t[(r + 1) * inner + i];
                }
            }
            push(a, Tensor::new(a.shape().to_vec(), t));
        }
        Op::StraightThrough(a) => push(a, g.clone()),
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident) => {
        impl std::ops::$trait for &Value {
            type Output = Value;
            fn $method(self, rhs: &Value) -> Value {
                Value::$method(self, rhs)
            }
        }
        impl std::ops::$trait for Value {
            type Output = Value;
            fn $method(self, rhs: Value) -> Value {
                Value::$method(&self, &rhs)
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl std::ops::Neg for &Value {
    type Output = Value;
    fn neg(self) -> Value {
        Value::neg(self)
    }
}
