//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is an append-only record of operations. Leaves are registered
//! with [`Graph::leaf`] (trainable) or [`Graph::constant`]; every operation
//! pushes one node whose inputs precede it, so node order is a topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients are
//! accumulated in node-creation order, which makes two backward passes over
//! the same graph bit-identical.
//!
//! Broadcasting is deliberately narrow: binary ops accept equal shapes or a
//! one-element operand. Row-wise bias addition and the message concatenation
//! used by the watermark encoder are dedicated ops.

use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![T::zero(); n]).expect("positive shape")
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n]).expect("positive shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Gathers the listed rows of a matrix into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::Validation(format!(
                    "row {i} out of range for {} rows",
                    self.rows()
                )));
            }
            out.extend_from_slice(self.row(i));
        }
        if idx.is_empty() {
            return Err(Error::Validation("cannot select zero rows".into()));
        }
        Self::matrix(idx.len(), c, out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElemOp<T> {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    Clip01,
    Scale(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Clip01,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Scale(usize, T),
    Unary(Unary, usize),
    AddBias(usize, usize),
    ConcatBroadcast(usize, usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
    Mse(usize, usize),
    BceWithLogits { logits: usize, targets: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Some trainable leaf is reachable from this node.
    tracked: bool,
    name: Option<String>,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    leaves: Vec<(usize, Option<String>, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(i, _, _)| *i == v.0)
            .map(|(_, _, t)| t)
    }

    /// Gradient map keyed by leaf name, in registration order.
    pub fn named(&self) -> Vec<(&str, &Tensor<T>)> {
        self.leaves
            .iter()
            .filter_map(|(_, n, t)| n.as_deref().map(|n| (n, t)))
            .collect()
    }
}

fn is_one(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let tracked = value.requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
            name: Some(name.into()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers data that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut value = t;
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bpj;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (shape, data): (Vec<usize>, Vec<T>) = if sa == sb {
            (sa, av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect())
        } else if is_one(&sb) {
            let y = bv[0];
            (sa, av.iter().map(|&x| f(x, y)).collect())
        } else if is_one(&sa) {
            let x = av[0];
            (sb, bv.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::dim("elementwise", &sa, &sb));
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Binary(kind, a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a.0, c), &[a.0])
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let t = self.value(a).map(|x| match kind {
            Unary::Relu => x.max(T::zero()),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Clip01 => x.max(T::zero()).min(T::one()),
        });
        self.push(t, Op::Unary(kind, a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// Clamp into `[0, 1]`; the gradient is zero strictly outside the interval.
    pub fn clip01(&mut self, a: Var) -> Var {
        self.unary(Unary::Clip01, a)
    }

    /// Dispatches an [`ElemOp`] over one or two arguments.
    pub fn elementwise(&mut self, op: ElemOp<T>, args: &[Var]) -> Result<Var> {
        let arity = match op {
            ElemOp::Add | ElemOp::Sub | ElemOp::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        Ok(match op {
            ElemOp::Add => self.add(args[0], args[1])?,
            ElemOp::Sub => self.sub(args[0], args[1])?,
            ElemOp::Mul => self.mul(args[0], args[1])?,
            ElemOp::Relu => self.relu(args[0]),
            ElemOp::Tanh => self.tanh(args[0]),
            ElemOp::Sigmoid => self.sigmoid(args[0]),
            ElemOp::Clip01 => self.clip01(args[0]),
            ElemOp::Scale(c) => self.scale(args[0], c),
        })
    }

    /// `x[n×k] + b[k]` added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let k = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || self.value(b).numel() != k {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        for row in t.data_mut().chunks_mut(k) {
            for (o, &bj) in row.iter_mut().zip(&bv) {
                *o = *o + bj;
            }
        }
        Ok(self.push(t, Op::AddBias(x.0, b.0), &[x.0, b.0]))
    }

    /// Appends `r` to the rows of `x[n×d]`: the same vector when `r` is
    /// `[L]`, row by row when `r` is `[n×L]`.
    pub fn concat_broadcast(&mut self, x: Var, r: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sr = self.shape(r).to_vec();
        let per_row = sr.len() == 2;
        if sx.len() != 2 || sr.len() > 2 || (per_row && sr[0] != sx[0]) {
            return Err(Error::dim("concat_broadcast", &sx, &sr));
        }
        let (n, d) = (sx[0], sx[1]);
        let rv = self.value(r).data();
        let l = if per_row { sr[1] } else { rv.len() };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * (d + l));
        for i in 0..n {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
            if per_row {
                out.extend_from_slice(&rv[i * l..(i + 1) * l]);
            } else {
                out.extend_from_slice(rv);
            }
        }
        let t = Tensor::matrix(n, d + l, out)?;
        Ok(self.push(t, Op::ConcatBroadcast(x.0, r.0), &[x.0, r.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Mean softmax cross-entropy of `logits[n×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let per = row_cross_entropy(self.value(logits), labels);
        let n = T::lit(labels.len() as f64);
        let loss = per.iter().copied().sum::<T>() / n;
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.0]))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim("mse", sa, sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = T::lit(av.len() as f64);
        let s = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    ///
    /// `targets` either matches the shape of `logits` or has one entry per
    /// trailing column, in which case it is applied to every row. Targets may
    /// be relaxed values in `[0, 1]`; they receive a gradient like any input.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (sl, st) = (self.shape(logits).to_vec(), self.shape(targets).to_vec());
        let lv = self.value(logits);
        let tv = self.value(targets);
        let width = tv.numel();
        if !(sl == st || lv.cols() == width || (sl.len() == 1 && sl[0] == width)) {
            return Err(Error::dim("bce_with_logits", &sl, &st));
        }
        let (ld, td) = (lv.data(), tv.data());
        let n = T::lit(ld.len() as f64);
        let s = ld
            .iter()
            .enumerate()
            .map(|(i, &l)| (l.max(T::zero()) - l * td[i % width]) + (-l.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.0,
            },
            &[logits.0, targets.0],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.tracked)
            .map(|(i, n)| {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                let t = Tensor::new(n.value.shape().to_vec(), data).expect("leaf shape");
                (i, n.name.clone(), t)
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        let acc = |grads: &mut [Option<Vec<T>>], j: usize, contrib: Vec<T>| {
            if !self.nodes[j].tracked {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                if self.nodes[*a].tracked {
                    let mut da = vec![T::zero(); m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    acc(grads, *a, da);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![T::zero(); k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            if arp == T::zero() {
                                continue;
                            }
                            for (o, &gj) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o = *o + arp * gj;
                            }
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (na, nb) = (av.numel(), bv.numel());
                let nout = out.numel();
                let at = |k: usize| av.data()[if na == 1 { 0 } else { k }];
                let bt = |k: usize| bv.data()[if nb == 1 { 0 } else { k }];
                let reduce = |full: Vec<T>, len: usize| -> Vec<T> {
                    if len == 1 && nout != 1 {
                        vec![full.into_iter().sum()]
                    } else {
                        full
                    }
                };
                let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|&x| -x).collect()),
                    Binary::Mul => (
                        (0..nout).map(|k| g[k] * bt(k)).collect(),
                        (0..nout).map(|k| g[k] * at(k)).collect(),
                    ),
                };
                acc(grads, *a, reduce(ga, na));
                acc(grads, *b, reduce(gb, nb));
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::Unary(kind, a) => {
                let x = self.nodes[*a].value.data();
                let y = out.data();
                let d: Vec<T> = (0..g.len())
                    .map(|k| {
                        let local = match kind {
                            Unary::Relu => {
                                if x[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Tanh => T::one() - y[k] * y[k],
                            Unary::Sigmoid => y[k] * (T::one() - y[k]),
                            Unary::Clip01 => {
                                if x[k] >= T::zero() && x[k] <= T::one() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        g[k] * local
                    })
                    .collect();
                acc(grads, *a, d);
            }
            Op::AddBias(x, b) => {
                let k = self.nodes[*b].value.numel();
                let mut db = vec![T::zero(); k];
                for row in g.chunks(k) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                acc(grads, *x, g.to_vec());
                acc(grads, *b, db);
            }
            Op::ConcatBroadcast(x, r) => {
                let xs = self.nodes[*x].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let rs = self.nodes[*r].value.shape();
                let per_row = rs.len() == 2;
                let l = if per_row { rs[1] } else { self.nodes[*r].value.numel() };
                let w = d + l;
                let mut dx = Vec::with_capacity(n * d);
                let mut dr = vec![T::zero(); if per_row { n * l } else { l }];
                for (i, row) in g.chunks(w).enumerate() {
                    dx.extend_from_slice(&row[..d]);
                    let off = if per_row { i * l } else { 0 };
                    for (o, &v) in dr[off..off + l].iter_mut().zip(&row[d..]) {
                        *o = *o + v;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *r, dr);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                acc(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                acc(grads, *a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = &self.nodes[*logits].value;
                let c = lv.cols();
                let n = T::lit(labels.len() as f64);
                let mut d = softmax_rows(lv);
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] = d[r * c + y] - T::one();
                }
                for v in &mut d {
                    *v = *v * g[0] / n;
                }
                acc(grads, *logits, d);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let n = T::lit(av.len() as f64);
                let two = T::lit(2.0);
                let da: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| two * (x - y) / n * g[0])
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::BceWithLogits { logits, targets } => {
                let ld = self.nodes[*logits].value.data();
                let td = self.nodes[*targets].value.data();
                let width = td.len();
                let n = T::lit(ld.len() as f64);
                let dl: Vec<T> = ld
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| (sigmoid(l) - td[k % width]) / n * g[0])
                    .collect();
                let mut dt = vec![T::zero(); width];
                for (k, &l) in ld.iter().enumerate() {
                    dt[k % width] = dt[k % width] - l / n * g[0];
                }
                acc(grads, *logits, dl);
                acc(grads, *targets, dt);
            }
        }
    }
}

/// Row-wise softmax of a matrix, stabilised by max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<T> {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Per-row cross-entropy `logsumexp(row) - row[label]`.
pub fn row_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Vec<T> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            (m - row[y]) + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
        })
        .collect()
}

/// Central-difference gradient of `f` with respect to every entry of
/// `params`. `f` receives the perturbed parameter list.
pub fn finite_diff_grad<T, F>(mut f: F, params: &[Tensor<T>], h: T) -> Result<Vec<Tensor<T>>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Validation("finite-difference step must be > 0".into()));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let two_h = h + h;
    let mut evals = 0usize;
    for t in 0..params.len() {
        let mut g = vec![T::zero(); params[t].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let fp = f(&work)?;
            work[t].data_mut()[k] = orig - h;
            let fm = f(&work)?;
            work[t].data_mut()[k] = orig;
            evals += 2;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::numeric("finite_diff_grad objective", evals));
            }
            *gk = (fp - fm) / two_h;
        }
        out.push(Tensor::new(params[t].shape().to_vec(), g)?);
    }
    Ok(out)
}
