use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Index maps from each output element to the operand elements it reads.
#[derive(Debug)]
struct Broadcast {
    lhs: Vec<usize>,
    rhs: Vec<usize>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var, Option<Broadcast>),
    AddScalar(Var),
    MulScalar(Var, S),
    Relu(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    /// Mean over the reduced axes; `map[i]` is the output slot of input `i`.
    Mean {
        x: Var,
        map: Vec<usize>,
        count: usize,
    },
    SumAll(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Nll(Var, Vec<usize>),
    IndexRows(Var, Vec<usize>),
    AssembleRows(Vec<(Var, Vec<usize>)>),
    Conv2d {
        x: Var,
        w: Var,
        pad: usize,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode recording of a computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// Leaf gradients live in persistent accumulators: calling [`Tape::backward`]
/// twice without [`Tape::zero_grad`] adds the two gradients.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    params: HashMap<String, Var>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned numpy broadcasting. Returns `None` maps when shapes are equal.
fn broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Option<Broadcast>)> {
    if a == b {
        return Ok((a.to_vec(), None));
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(shape_err(op, a, b));
        }
    }
    let operand_strides = |p: &[usize]| {
        let s = strides(p);
        p.iter()
            .zip(s)
            .map(|(&d, st)| if d == 1 { 0 } else { st })
            .collect::<Vec<_>>()
    };
    let (sa, sb) = (operand_strides(&pa), operand_strides(&pb));
    let n: usize = out.iter().product();
    let mut lhs = Vec::with_capacity(n);
    let mut rhs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        lhs.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
        rhs.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, Some(Broadcast { lhs, rhs })))
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert!(value.numel() == value.shape().iter().product::<usize>());
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiable when the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(value, Op::Leaf, rg)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named trainable parameter, reusing the existing leaf when the
    /// name was already bound so shared parameters accumulate into one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(
            Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor"),
            Op::Leaf,
            true,
        );
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[S]> {
        self.params.get(name).and_then(|v| self.grad(*v))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == S::zero() {
                    continue;
                }
                let yr = &y[p * n..(p + 1) * n];
                for (o, &yv) in row.iter_mut().zip(yr) {
                    *o = *o + xv * yv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: BinOp, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (shape, bc) = broadcast(name, self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let f = |p: S, q: S| match op {
            BinOp::Add => p + q,
            BinOp::Sub => p - q,
            BinOp::Mul => p * q,
            BinOp::Div => p / q,
        };
        let out: Vec<S> = match &bc {
            None => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            Some(m) => m
                .lhs
                .iter()
                .zip(&m.rhs)
                .map(|(&i, &j)| f(x[i], y[j]))
                .collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(op, a, b, bc), rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a);
        let out: Vec<S> = t.data().iter().map(|&v| v + c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a);
        let out: Vec<S> = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::MulScalar(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let t = self.value(a);
        let out: Vec<S> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, S::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, S::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, S::exp, Op::Exp(a))
    }

    /// Mean over `axes`, keeping reduced axes as size 1.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(shape_err("mean_axes", &shape, axes));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        if count == 0 {
            return Err(shape_err("mean_axes", &shape, axes));
        }
        let out_strides: Vec<usize> = strides(&out_shape)
            .into_iter()
            .zip(&out_shape)
            .map(|(s, &d)| if d == 1 { 0 } else { s })
            .collect();
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.value(a).data();
        let mut sums = vec![S::zero(); out_shape.iter().product()];
        for (&v, &o) in x.iter().zip(&map) {
            sums[o] = sums[o] + v;
        }
        let c = S::from_usize_lossy(count);
        let out = sums.into_iter().map(|s| s / c).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Mean { x: a, map, count }, rg))
    }

    /// Population variance over `axes` (keepdim), composed from recorded ops.
    pub fn var_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mu = self.mean_axes(a, axes)?;
        let centered = self.sub(a, mu)?;
        let sq = self.mul(centered, centered)?;
        self.mean_axes(sq, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn last_axis(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        match shape.last() {
            Some(&w) if w > 0 => Ok((self.value(a).numel() / w, w)),
            _ => Err(shape_err(op, shape, &[])),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, w) = self.last_axis(a, "softmax")?;
        let x = self.value(a).data();
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            softmax_row(&x[r * w..(r + 1) * w], &mut out[r * w..(r + 1) * w]);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg))
    }

    /// Numerically stable log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, w) = self.last_axis(a, "log_softmax")?;
        let x = self.value(a).data();
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * w..(r + 1) * w];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a), rg))
    }

    /// Mean negative log-likelihood of `labels` under rank-2 log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logp).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
            return Err(shape_err("nll", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let x = self.value(logp).data();
        let total: S = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| x[i * classes + y])
            .sum();
        let loss = -total / S::from_usize_lossy(labels.len());
        let rg = self.rg(&[logp]);
        Ok(self.push(Tensor::scalar(loss), Op::Nll(logp, labels.to_vec()), rg))
    }

    /// Mean cross-entropy of rank-2 logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll(lp, labels)
    }

    /// Gathers leading-axis rows.
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(rows)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::IndexRows(a, rows.to_vec()), rg))
    }

    /// Scatters row blocks back into a `total`-row tensor. Every output row must
    /// be written by exactly one block.
    pub fn assemble_rows(&mut self, parts: &[(Var, Vec<usize>)], total: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("assemble_rows: no parts".into()))?;
        let tail: Vec<usize> = self.shape(first.0)[1..].to_vec();
        let w: usize = tail.iter().product();
        let mut out = vec![S::zero(); total * w];
        let mut seen = vec![false; total];
        for (v, rows) in parts {
            let t = self.value(*v);
            if t.shape()[1..] != tail[..] || t.rows() != rows.len() {
                return Err(shape_err("assemble_rows", t.shape(), &[rows.len()]));
            }
            for (k, &r) in rows.iter().enumerate() {
                if r >= total || seen[r] {
                    return Err(shape_err("assemble_rows", &[total], &[r]));
                }
                seen[r] = true;
                out[r * w..(r + 1) * w].copy_from_slice(t.row(k));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("assemble_rows: rows not covered".into()));
        }
        let mut shape = vec![total];
        shape.extend(tail);
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::new(shape, out)?, Op::AssembleRows(parts.to_vec()), rg))
    }

    /// 2-D cross-correlation, stride 1, symmetric zero padding.
    /// `x`: `[B, Cin, H, W]`, `w`: `[Cout, Cin, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![S::zero(); b * cout * oh * ow];
        conv_loop(
            [b, cin, h, wd],
            [cout, k],
            pad,
            |xi, wi, oi| out[oi] = out[oi] + xv[xi] * wv[wi],
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![b, cout, oh, ow], out)?,
            Op::Conv2d { x, w, pad },
            rg,
        ))
    }

    /// Global average pooling of `[B, C, H, W]` into `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", &s, &[4]));
        }
        let m = self.mean_axes(x, &[2, 3])?;
        self.reshape(m, &[s[0], s[1]])
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar `loss`, adding into leaf accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let acc = accumulate(&mut self.leaf_grads[i], g.len());
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a = *a + *d;
                    }
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<S>, out: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.numel();
        let y = self.nodes[out].value.data();
        macro_rules! slot {
            ($v:expr) => {
                accumulate(&mut grads[$v.0], len($v))
            };
        }
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (x, w) = (val(*a), val(*b));
                if rg(*a) {
                    let ga = slot!(*a);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * w[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                }
                if rg(*b) {
                    let gb = slot!(*b);
                    for i in 0..m {
                        for p in 0..k {
                            let xv = x[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + xv * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (x, z) = (val(*a), val(*b));
                let n = g.len();
                let ia = |k: usize| bc.as_ref().map_or(k, |m| m.lhs[k]);
                let ib = |k: usize| bc.as_ref().map_or(k, |m| m.rhs[k]);
                if rg(*a) {
                    let ga = slot!(*a);
                    for k in 0..n {
                        let d = match kind {
                            BinOp::Add | BinOp::Sub => g[k],
                            BinOp::Mul => g[k] * z[ib(k)],
                            BinOp::Div => g[k] / z[ib(k)],
                        };
                        ga[ia(k)] = ga[ia(k)] + d;
                    }
                }
                if rg(*b) {
                    let gb = slot!(*b);
                    for k in 0..n {
                        let d = match kind {
                            BinOp::Add => g[k],
                            BinOp::Sub => -g[k],
                            BinOp::Mul => g[k] * x[ia(k)],
                            BinOp::Div => -g[k] * y[k] / z[ib(k)],
                        };
                        gb[ib(k)] = gb[ib(k)] + d;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = slot!(*a);
                for (s, d) in ga.iter_mut().zip(g) {
                    *s = *s + *d;
                }
            }
            Op::MulScalar(a, c) => {
                let ga = slot!(*a);
                for (s, d) in ga.iter_mut().zip(g) {
                    *s = *s + *d * *c;
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let ga = slot!(*a);
                for k in 0..g.len() {
                    if x[k] > S::zero() {
                        ga[k] = ga[k] + g[k];
                    }
                }
            }
            Op::Sqrt(a) => {
                let ga = slot!(*a);
                let two = S::lit(2.0);
                for k in 0..g.len() {
                    ga[k] = ga[k] + g[k] / (two * y[k]);
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                let ga = slot!(*a);
                for k in 0..g.len() {
                    ga[k] = ga[k] + g[k] / x[k];
                }
            }
            Op::Exp(a) => {
                let ga = slot!(*a);
                for k in 0..g.len() {
                    ga[k] = ga[k] + g[k] * y[k];
                }
            }
            Op::Mean { x, map, count } => {
                let c = S::from_usize_lossy(*count);
                let gx = slot!(*x);
                for (s, &o) in gx.iter_mut().zip(map) {
                    *s = *s + g[o] / c;
                }
            }
            Op::SumAll(a) => {
                let ga = slot!(*a);
                for s in ga.iter_mut() {
                    *s = *s + g[0];
                }
            }
            Op::Softmax(a) => {
                let w = *self.shape(*a).last().unwrap_or(&1);
                let ga = slot!(*a);
                for r in 0..g.len() / w {
                    let (gr, yr) = (&g[r * w..(r + 1) * w], &y[r * w..(r + 1) * w]);
                    let dot: S = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for j in 0..w {
                        ga[r * w + j] = ga[r * w + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let w = *self.shape(*a).last().unwrap_or(&1);
                let ga = slot!(*a);
                for r in 0..g.len() / w {
                    let (gr, yr) = (&g[r * w..(r + 1) * w], &y[r * w..(r + 1) * w]);
                    let total: S = gr.iter().copied().sum();
                    for j in 0..w {
                        ga[r * w + j] = ga[r * w + j] + gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::Nll(a, labels) => {
                let classes = self.shape(*a)[1];
                let scale = g[0] / S::from_usize_lossy(labels.len());
                let ga = slot!(*a);
                for (i, &lab) in labels.iter().enumerate() {
                    ga[i * classes + lab] = ga[i * classes + lab] - scale;
                }
            }
            Op::IndexRows(a, rows) => {
                let w = self.value(*a).row_len();
                let ga = slot!(*a);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        ga[r * w + j] = ga[r * w + j] + g[k * w + j];
                    }
                }
            }
            Op::AssembleRows(parts) => {
                let w = self.nodes[out].value.row_len();
                for (v, rows) in parts {
                    if !rg(*v) {
                        continue;
                    }
                    let gv = slot!(*v);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..w {
                            gv[k * w + j] = gv[k * w + j] + g[r * w + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let dims = [sx[0], sx[1], sx[2], sx[3]];
                let kd = [sw[0], sw[2]];
                let (xv, wv) = (val(*x), val(*w));
                if rg(*x) {
                    let gx = slot!(*x);
                    conv_loop(dims, kd, *pad, |xi, wi, oi| gx[xi] = gx[xi] + g[oi] * wv[wi]);
                }
                if rg(*w) {
                    let gw = slot!(*w);
                    conv_loop(dims, kd, *pad, |xi, wi, oi| gw[wi] = gw[wi] + g[oi] * xv[xi]);
                }
            }
        }
    }
}

fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let m = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Visits every (input, weight, output) flat-index triple of a padded
/// stride-1 convolution.
fn conv_loop(
    [b, cin, h, w]: [usize; 4],
    [cout, k]: [usize; 2],
    pad: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    for n in 0..b {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let oi = ((n * cout + co) * oh + i) * ow + j;
                    for ci in 0..cin {
                        for di in 0..k {
                            let r = i + di;
                            if r < pad || r - pad >= h {
                                continue;
                            }
                            for dj in 0..k {
                                let c = j + dj;
                                if c < pad || c - pad >= w {
                                    continue;
                                }
                                let xi = ((n * cin + ci) * h + (r - pad)) * w + (c - pad);
                                let wi = ((co * cin + ci) * k + di) * k + dj;
                                f(xi, wi, oi);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 2], &[0.; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![-1., 0., 2.]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
    }

    #[test]
    fn mean_along_axis0() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 3., 5., 7.]));
        let m = tape.mean_axes(a, &[0]).unwrap();
        assert_eq!(tape.shape(m), &[1, 2]);
        assert_eq!(tape.value(m).data(), &[3., 5.]);
    }

    #[test]
    fn broadcast_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2], &[0.; 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).requiring_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        // second call accumulates
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).requiring_grad());
        let c = tape.constant(Tensor::vector(vec![5.0]));
        let loss = tape.sum_all(c);
        // touch x so that the leaf has an accumulator
        let z = tape.mul_scalar(x, 0.0);
        let zs = tape.sum_all(z);
        let total = tape.add(loss, zs).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn uniform_logit_cross_entropy_gradient() {
        for y in 0..2 {
            let mut tape = Tape::new();
            let z = tape.leaf(t(&[1, 2], &[0.0, 0.0]).requiring_grad());
            let loss = tape.cross_entropy(z, &[y]).unwrap();
            assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
            tape.backward(loss).unwrap();
            let g = tape.grad(z).unwrap();
            let onehot = [(y == 0) as u8 as f64, (y == 1) as u8 as f64];
            assert!((g[0] - (0.5 - onehot[0])).abs() < 1e-15);
            assert!((g[1] - (0.5 - onehot[1])).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).requiring_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            tape.cross_entropy(z, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn constant_inputs_are_not_recorded_as_ops() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.relu(a);
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
        let p = tape.global_avg_pool(y).unwrap();
        assert_eq!(tape.shape(p), &[1, 1]);
        assert_eq!(tape.value(p).data(), &[2.5]);
    }

    #[test]
    fn shared_param_binds_once() {
        let mut tape = Tape::new();
        let w = Tensor::vector(vec![2.0]).requiring_grad();
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum_all(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.param_grad("w").unwrap(), &[4.0]);
    }
}
