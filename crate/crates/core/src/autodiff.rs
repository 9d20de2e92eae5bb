//! Reverse-mode differentiation over a flat tape.
//!
//! Every operation appends a node holding its forward value and the parent
//! references needed to pull adjoints back. Nodes are only ever appended, so
//! the tape order is a topological order and `backward` is a single reverse
//! sweep.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower/upper clamp applied to predictions before the logs in [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds reachable through [`Graph::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Relu,
    Exp,
    Log,
    Softmax,
    LayerNorm,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Mse,
    Bce,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Bce(Var, Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Minimum(Var, Var),
    Tile(Var),
    Clamp(Var, Vec<f64>, Vec<f64>),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded tape. Distinct graphs are independent and may live on
/// different threads.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of `v`, or `None` when no path from the root reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, materialized as zeros when it is unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }
}

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, "rhs", format!("{b:?} does not match lhs {a:?}")));
    }
    Ok(())
}

/// `[outer, axis_len, inner]` view of `dims` around `axis`.
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// `a[m,k] · b[k,n]` with 64-bit accumulation.
fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a[i * k + p].f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::of(v)));
    }
    out
}

fn transpose_raw<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
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

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.is_finite() || !self.parents_finite(&op),
            "non-finite output from finite inputs in {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents_finite(&self, op: &Op) -> bool {
        parents(op).iter().all(|p| self.nodes[p.0].value.is_finite())
    }

    fn derived(&mut self, dims: Vec<usize>, data: Vec<T>, op: Op) -> Var {
        let needs = parents(&op).iter().any(|p| self.needs(*p));
        let value = Tensor::new(dims, data).expect("op produced consistent dims");
        self.push(value, op, needs)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `x` that the backward pass treats as a constant.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf, false)
    }

    /// Dispatch for the core operation kinds.
    pub fn forward_op(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let want = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mse | OpKind::Bce => 2,
            OpKind::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != want {
            return Err(Error::shape(
                "forward_op",
                "inputs",
                format!("{kind:?} takes {want} inputs, got {}", inputs.len()),
            ));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Log => Ok(self.log(inputs[0])),
            OpKind::Softmax => Ok(self.softmax(inputs[0])),
            OpKind::LayerNorm => Ok(self.layer_norm(inputs[0])),
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, end } => self.slice(inputs[0], *axis, *start, *end),
            OpKind::Mse => self.mse(inputs[0], inputs[1]),
            OpKind::Bce => self.bce(inputs[0], inputs[1]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 {
            return Err(Error::shape("matmul", "lhs", format!("rank {} (need 2)", ad.len())));
        }
        if bd.len() != 2 {
            return Err(Error::shape("matmul", "rhs", format!("rank {} (need 2)", bd.len())));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        if bd[0] != k {
            return Err(Error::shape(
                "matmul",
                "rhs",
                format!("{bd:?} inner extent does not match lhs {ad:?}"),
            ));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(vec![m, n], data, Op::MatMul(a, b)))
    }

    /// Elementwise sum, or `a + b` with `b` a bias over the trailing dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad == bd {
            let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.derived(ad, data, Op::Add(a, b)));
        }
        if bd.len() == 1 && bd[0] == *ad.last().unwrap() {
            let bias = self.value(b).data();
            let data = self
                .value(a)
                .data()
                .chunks(bd[0])
                .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
                .collect();
            return Ok(self.derived(ad, data, Op::AddBias(a, b)));
        }
        Err(Error::shape(
            "add",
            "rhs",
            format!("{bd:?} is neither {ad:?} nor a trailing bias"),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("sub", self.dims(a), self.dims(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.derived(self.dims(a).to_vec(), data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("mul", self.dims(a), self.dims(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.derived(self.dims(a).to_vec(), data, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("minimum", self.dims(a), self.dims(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| if y < x { y } else { x });
        Ok(self.derived(self.dims(a).to_vec(), data, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::of(c);
        let t = self.value(a).map(|x| x * cv);
        self.unary(a, t, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let cv = T::of(c);
        let t = self.value(a).map(|x| x + cv);
        self.unary(a, t, Op::Offset(a))
    }

    fn unary(&mut self, a: Var, t: Tensor<T>, op: Op) -> Var {
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(a, t, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.unary(a, t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        self.unary(a, t, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.unary(a, t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.unary(a, t, Op::Sigmoid(a))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let e: Vec<f64> = row.iter().map(|&v| (v - m).f64().exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|&v| T::of(v / s)));
        }
        let t = Tensor::new(x.dims().to_vec(), out).unwrap();
        self.unary(a, t, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)).f64();
            let lse = m + row.iter().map(|&v| (v.f64() - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| T::of(v.f64() - lse)));
        }
        let t = Tensor::new(x.dims().to_vec(), out).unwrap();
        self.unary(a, t, Op::LogSoftmax(a))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let (mean, inv) = row_moments(row);
            out.extend(row.iter().map(|&v| T::of((v.f64() - mean) * inv)));
        }
        let t = Tensor::new(x.dims().to_vec(), out).unwrap();
        self.unary(a, t, Op::LayerNorm(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "inputs", "empty input list"))?;
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", "axis", format!("{axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for (i, &v) in inputs.iter().enumerate() {
            let d = self.dims(v);
            let ok = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(j, (x, y))| j == axis || x == y);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("input {i}"),
                    format!("{d:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += d[axis];
        }
        let mut dims = base.clone();
        dims[axis] = total;
        let (outer, _, inner) = split_axis(&dims, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let len = x.dims()[axis] * inner;
                data.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.derived(
            dims,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if axis >= d.len() || start >= end || end > d[axis] {
            return Err(Error::shape(
                "slice",
                "input",
                format!("range {start}..{end} on axis {axis} of {d:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&d, axis);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&x[base + start * inner..base + end * inner]);
        }
        let mut dims = d;
        dims[axis] = end - start;
        Ok(self.derived(dims, data, Op::Slice { input: a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(dims)?;
        Ok(self.unary(a, t, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if d.len() != 2 {
            return Err(Error::shape("transpose", "input", format!("rank {} (need 2)", d.len())));
        }
        let data = transpose_raw(self.value(a).data(), d[0], d[1]);
        Ok(self.derived(vec![d[1], d[0]], data, Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.f64()).sum();
        self.unary(a, Tensor::scalar(T::of(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: f64 = x.data().iter().map(|v| v.f64()).sum::<f64>() / x.len() as f64;
        self.unary(a, Tensor::scalar(T::of(s)), Op::Mean(a))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("mse", self.dims(a), self.dims(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p.f64() - q.f64()).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        Ok(self.derived(vec![1], vec![T::of(s)], Op::Mse(a, b)))
    }

    /// Binary cross-entropy summed over all elements. Predictions are clamped
    /// to `[BCE_EPS, 1 - BCE_EPS]` first.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_dims("bce", self.dims(pred), self.dims(target))?;
        let (p, t) = (self.value(pred), self.value(target));
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let (p, t) = (clamp_prob(p.f64()), t.f64());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.derived(vec![1], vec![T::of(s)], Op::Bce(pred, target)))
    }

    /// Rows of a `[K, D]` table selected by `idx`, giving `[idx.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let d = self.dims(table).to_vec();
        if d.len() != 2 {
            return Err(Error::shape("gather_rows", "table", format!("rank {} (need 2)", d.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d[0]) {
            return Err(Error::shape("gather_rows", "idx", format!("row {bad} out of {}", d[0])));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "idx", "empty index list"));
        }
        let x = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * d[1]);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        Ok(self.derived(vec![idx.len(), d[1]], data, Op::GatherRows(table, idx.to_vec())))
    }

    /// One element per row: `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = (x.rows(), x.last_dim());
        if idx.len() != rows {
            return Err(Error::shape("pick", "idx", format!("{} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(Error::shape("pick", "idx", format!("column {bad} out of {d}")));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| x.data()[r * d + c]).collect();
        Ok(self.derived(vec![rows], data, Op::Pick(a, idx.to_vec())))
    }

    /// Repeats a `[D]` or `[1, D]` tensor into `[n, D]`.
    pub fn tile(&mut self, a: Var, n: usize) -> Result<Var> {
        let d = self.dims(a).to_vec();
        let width = match d.as_slice() {
            [w] | [1, w] => *w,
            _ => return Err(Error::shape("tile", "input", format!("{d:?} is not a single row"))),
        };
        if n == 0 {
            return Err(Error::shape("tile", "count", "zero repetitions"));
        }
        let row = self.value(a).data().to_vec();
        let data = row.iter().copied().cycle().take(n * width).collect();
        Ok(self.derived(vec![n, width], data, Op::Tile(a)))
    }

    /// Clamps column `j` of the trailing axis into `[lo[j], hi[j]]`.
    pub fn clamp_cols(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let d = self.value(a).last_dim();
        if lo.len() != d || hi.len() != d {
            return Err(Error::shape("clamp_cols", "bounds", format!("need {d} bounds")));
        }
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| T::of(v.f64().clamp(lo[j], hi[j])))
            })
            .collect();
        Ok(self.derived(
            self.dims(a).to_vec(),
            data,
            Op::Clamp(a, lo.to_vec(), hi.to_vec()),
        ))
    }

    /// Forward value of `quantized`; the adjoint flows unchanged to `continuous`.
    pub fn straight_through(&mut self, continuous: Var, quantized: Var) -> Result<Var> {
        same_dims("straight_through", self.dims(continuous), self.dims(quantized))?;
        let t = self.value(quantized).clone();
        let needs = self.needs(continuous);
        Ok(self.push(t, Op::StraightThrough(continuous), needs))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape(
                "backward",
                "root",
                format!("{:?} is not scalar", rv.dims()),
            ));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.pull(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let dims = self.nodes[..n].iter().map(|nd| nd.value.dims().to_vec()).collect::<Vec<_>>();
        let grads = grads
            .into_iter()
            .zip(&dims)
            .map(|(g, d)| g.map(|g| Tensor::new(d.clone(), g).unwrap()))
            .collect();
        Ok(Gradients { grads, dims })
    }

    fn pull(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ad, bd) = (self.dims(*a), self.dims(*b));
                let (m, k, n) = (ad[0], ad[1], bd[1]);
                if self.needs(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.needs(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddBias(a, b) => {
                send(*a, g.to_vec());
                if self.needs(*b) {
                    let w = self.dims(*b)[0];
                    let mut acc = vec![0f64; w];
                    for row in g.chunks(w) {
                        acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v.f64());
                    }
                    send(*b, acc.into_iter().map(T::of).collect());
                }
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                send(*a, g.iter().zip(z).map(|(&g, &z)| g * z).collect());
                send(*b, g.iter().zip(x).map(|(&g, &x)| g * x).collect());
            }
            Op::Minimum(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let pick_b = |k: usize| z[k] < x[k];
                send(
                    *a,
                    (0..g.len()).map(|k| if pick_b(k) { T::zero() } else { g[k] }).collect(),
                );
                send(
                    *b,
                    (0..g.len()).map(|k| if pick_b(k) { g[k] } else { T::zero() }).collect(),
                );
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                send(*a, g.iter().map(|&v| v * c).collect());
            }
            Op::Offset(a) | Op::Reshape(a) | Op::StraightThrough(a) => send(*a, g.to_vec()),
            Op::Relu(a) => {
                let x = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
            Op::Log(a) => send(*a, g.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect()),
            Op::Tanh(a) => send(
                *a,
                g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
            ),
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&g, &y)| g.f64() * y.f64()).sum();
                    out.extend(gr.iter().zip(yr).map(|(&g, &y)| T::of(y.f64() * (g.f64() - dot))));
                }
                send(*a, out);
            }
            Op::LogSoftmax(a) => {
                let d = node.value.last_dim();
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    let s: f64 = gr.iter().map(|v| v.f64()).sum();
                    out.extend(gr.iter().zip(yr).map(|(&g, &y)| T::of(g.f64() - y.f64().exp() * s)));
                }
                send(*a, out);
            }
            Op::LayerNorm(a) => {
                let d = node.value.last_dim();
                let x = val(*a);
                let mut out = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(x.chunks(d)) {
                    let (_, inv) = row_moments(xr);
                    let gm: f64 = gr.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
                    let gy: f64 =
                        gr.iter().zip(yr).map(|(&g, &y)| g.f64() * y.f64()).sum::<f64>() / d as f64;
                    out.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&g, &y)| T::of(inv * (g.f64() - gm - y.f64() * gy))),
                    );
                }
                send(*a, out);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.dims(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.dims(v)[*axis];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(v, part);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(self.dims(*input), *axis);
                let width = node.value.dims()[*axis];
                let mut full = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    full[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                send(*input, full);
            }
            Op::Transpose(a) => {
                let d = node.value.dims();
                send(*a, transpose_raw(g, d[0], d[1]));
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![T::of(g[0].f64() / n as f64); n]);
            }
            Op::Mse(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let c = 2.0 * g[0].f64() / x.len() as f64;
                let d: Vec<T> = x.iter().zip(z).map(|(&x, &z)| T::of(c * (x.f64() - z.f64()))).collect();
                if self.needs(*b) {
                    send(*b, d.iter().map(|&v| -v).collect());
                }
                send(*a, d);
            }
            Op::Bce(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let g0 = g[0].f64();
                send(
                    *p,
                    pv.iter()
                        .zip(tv)
                        .map(|(&p, &t)| {
                            let (p, t) = (p.f64(), t.f64());
                            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                                T::zero()
                            } else {
                                T::of(g0 * (-t / p + (1.0 - t) / (1.0 - p)))
                            }
                        })
                        .collect(),
                );
                send(
                    *t,
                    pv.iter()
                        .map(|&p| {
                            let p = clamp_prob(p.f64());
                            T::of(g0 * ((1.0 - p).ln() - p.ln()))
                        })
                        .collect(),
                );
            }
            Op::GatherRows(table, idx) => {
                if self.needs(*table) {
                    let d = self.dims(*table);
                    let w = d[1];
                    let mut acc = vec![0f64; d[0] * w];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..w {
                            acc[i * w + j] += g[r * w + j].f64();
                        }
                    }
                    send(*table, acc.into_iter().map(T::of).collect());
                }
            }
            Op::Pick(a, idx) => {
                let d = self.value(*a).last_dim();
                let mut full = vec![T::zero(); self.value(*a).len()];
                for (r, &c) in idx.iter().enumerate() {
                    full[r * d + c] = g[r];
                }
                send(*a, full);
            }
            Op::Tile(a) => {
                let w = node.value.last_dim();
                let mut acc = vec![0f64; w];
                for row in g.chunks(w) {
                    acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v.f64());
                }
                send(*a, acc.into_iter().map(T::of).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let d = lo.len();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .enumerate()
                        .map(|(k, (&g, &x))| {
                            let (x, j) = (x.f64(), k % d);
                            if x >= lo[j] && x <= hi[j] {
                                g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddBias(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Mse(a, b)
        | Op::Bce(a, b)
        | Op::Minimum(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::LayerNorm(a)
        | Op::Reshape(a)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::GatherRows(a, _)
        | Op::Pick(a, _)
        | Op::Tile(a)
        | Op::Clamp(a, _, _)
        | Op::StraightThrough(a) => vec![*a],
        Op::Slice { input, .. } => vec![*input],
        Op::Concat { inputs, .. } => inputs.clone(),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

const LN_EPS: f64 = 1e-5;

/// Row mean and inverse standard deviation.
fn row_moments<T: Real>(row: &[T]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}
