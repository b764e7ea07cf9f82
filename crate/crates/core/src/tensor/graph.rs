use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        smoothing: f64,
    },
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-use recording tape.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeError {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Output shape of a suffix-broadcast binary op, plus which side repeats.
enum Broadcast {
    Same,
    /// Right operand repeats over the left's leading dims.
    Right,
    /// Left operand repeats over the right's leading dims.
    Left,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Broadcast::Right)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast::Left)
    } else {
        Err(shape_err(op, a, b))
    }
}

/// `c = beta * c + a * b` on strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given strides
    // and dimensions, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the input flat index it reads from.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (see [`Graph::grad`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A trainable parameter, borrowed from the store. Repeated calls return
    /// the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(&store.get(id).value), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// A parameter treated as a constant (inference).
    pub fn param_frozen(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.push(Cow::Borrowed(&store.get(id).value), Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = broadcast(name, ta.shape(), tb.shape())?;
        let out = match mode {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Right => {
                let bl = tb.len();
                ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % bl])).collect()
            }
            Broadcast::Left => {
                let al = ta.len();
                tb.data().iter().enumerate().map(|(i, &y)| f(ta.data()[i % al], y)).collect()
            }
        };
        let shape = match mode {
            Broadcast::Left => tb.shape().to_vec(),
            _ => ta.shape().to_vec(),
        };
        Ok((Tensor { shape, data: out }, mode))
    }

    /// Elementwise sum; either operand may broadcast over the other's
    /// leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_owned(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_owned(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|x| x * c).collect(),
        };
        self.push_owned(t, Op::Scale(a, c), &[a])
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out);
        Ok(self.push_owned(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over the leading axis: `[g,m,k] x [g,k,n] -> [g,m,n]`,
    /// or with `trans_b`, `[g,m,k] x [g,n,k]^T -> [g,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; g * m * n];
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                (k, 1),
                &tb.data()[i * k * n..],
                b_strides,
                0.0,
                &mut out[i * m * n..],
            );
        }
        let t = Tensor {
            shape: vec![g, m, n],
            data: out,
        };
        Ok(self.push_owned(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        };
        self.push_owned(t, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data: out,
        };
        self.push_owned(t, Op::Softmax(a), &[a])
    }

    /// Row-wise normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", tx.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        Ok(self.push_owned(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of a `[V,d]` table: result `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(TensorError::Invalid("embedding table must be rank 2".into()));
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding lookup of zero ids".into()));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexError { index: id, bound: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor {
            shape: vec![ids.len(), d],
            data: out,
        };
        Ok(self.push_owned(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean masked cross-entropy of `[T,V]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, mask, 0.0)
    }

    /// Cross-entropy against `(1 - smoothing) * onehot + smoothing / V`.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[f64],
        smoothing: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() || targets.len() != mask.len() {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len(), mask.len()]));
        }
        let (t_len, v) = (tl.shape()[0], tl.shape()[1]);
        let total: f64 = mask.iter().sum();
        if total <= 0.0 {
            return Err(TensorError::EmptyLossError);
        }
        let weights: Vec<f64> = mask.iter().map(|m| m / total).collect();
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for t in 0..t_len {
            if targets[t] >= v {
                return Err(TensorError::IndexError {
                    index: targets[t],
                    bound: v,
                });
            }
            let row = &tl.data()[t * v..(t + 1) * v];
            let lse = log_sum_exp(row);
            if weights[t] != 0.0 {
                let target_term = if smoothing == 0.0 {
                    row[targets[t]]
                } else {
                    let mean = row.iter().sum::<f64>() / v as f64;
                    (1.0 - smoothing) * row[targets[t]] + smoothing * mean
                };
                loss += weights[t] * (lse - target_term);
            }
            for p in &mut probs[t * v..(t + 1) * v] {
                *p = (*p - lse).exp();
            }
        }
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                smoothing,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push_owned(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor { shape, data: out };
        Ok(self.push_owned(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("narrow", s, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let t = Tensor { shape, data: out };
        Ok(self.push_owned(t, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_owned(t, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..s.len()).collect::<Vec<_>>() {
            return Err(shape_err("permute", s, perm));
        }
        let map = permute_index(s, perm);
        let data = map.iter().map(|&i| tx.data()[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        let t = Tensor { shape, data };
        Ok(self.push_owned(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        self.push_owned(t, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse-mode sweep from a shape-`[1]` loss. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        if self.shape(loss) != [1] {
            return Err(TensorError::NonScalarBackward(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v` after [`backward`](Self::backward).
    /// Nodes the loss does not depend on get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let shape = self.shape(v).to_vec();
        Some(match &grads[v.0] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        })
    }

    /// Gradients of every parameter placed on this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.reduce_into(*a, g, 1.0, grads);
                self.reduce_into(*b, g, sign, grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let bl = tb.len();
                    let ga: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * tb.data()[j % bl]).collect();
                    self.reduce_into(*a, &ga, 1.0, grads);
                }
                if self.wants(*b) {
                    let al = ta.len();
                    let gb: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * ta.data()[j % al]).collect();
                    self.reduce_into(*b, &gb, 1.0, grads);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for (x, gj) in acc.iter_mut().zip(g) {
                        *x += c * gj;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let acc = slot(grads, *a, m * k);
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), 1.0, acc);
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), 1.0, acc);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (gs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if self.wants(*a) {
                    let acc = slot(grads, *a, gs * m * k);
                    for i in 0..gs {
                        let gi = &g[i * m * n..];
                        let bi = &tb.data()[i * k * n..];
                        let b_view = if *trans_b { (k, 1) } else { (1, n) };
                        gemm(m, n, k, gi, (n, 1), bi, b_view, 1.0, &mut acc[i * m * k..]);
                    }
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, gs * k * n);
                    for i in 0..gs {
                        let gi = &g[i * m * n..];
                        let ai = &ta.data()[i * m * k..];
                        if *trans_b {
                            // dB[n,k] = G^T [n,m] * A [m,k]
                            gemm(n, m, k, gi, (1, n), ai, (k, 1), 1.0, &mut acc[i * k * n..]);
                        } else {
                            // dB[k,n] = A^T [k,m] * G [m,n]
                            gemm(k, m, n, ai, (1, k), gi, (n, 1), 1.0, &mut acc[i * k * n..]);
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let acc = slot(grads, *a, g.len());
                for ((x, gj), y) in acc.iter_mut().zip(g).zip(out.data()) {
                    *x += gj * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let acc = slot(grads, *a, g.len());
                for ((x, gj), y) in acc.iter_mut().zip(g).zip(out.data()) {
                    *x += gj * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let input = self.value(*a).data();
                let acc = slot(grads, *a, g.len());
                for ((x, gj), xin) in acc.iter_mut().zip(g).zip(input) {
                    if *xin > 0.0 {
                        *x += gj;
                    }
                }
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                let acc = slot(grads, *a, g.len());
                for ((acc_row, g_row), y_row) in acc.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        acc_row[j] += y_row[j] * (g_row[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let acc = slot(grads, *gain, d);
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let acc = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            acc[j] += gr[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let acc = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, ((acc_row, gr), xr)) in acc.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            acc_row[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.last_dim();
                let v = self.shape(*table)[0];
                let acc = slot(grads, *table, v * d);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        acc[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                smoothing,
            } => {
                let v = self.shape(*logits)[1];
                let acc = slot(grads, *logits, probs.len());
                let up = g[0];
                for (t, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..v {
                        let mut q = smoothing / v as f64;
                        if j == targets[t] {
                            q += 1.0 - smoothing;
                        }
                        acc[t * v + j] += up * w * (probs[t * v + j] - q);
                    }
                }
            }
            Op::Sum(a) => {
                let acc = slot(grads, *a, self.value(*a).len());
                acc.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let acc = slot(grads, *a, n);
                let share = g[0] / n as f64;
                acc.iter_mut().for_each(|x| *x += share);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let total_block = out.shape()[*axis] * inner;
                for p in parts {
                    let block = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let acc = slot(grads, *p, outer * block);
                        for o in 0..outer {
                            let src = &g[o * total_block + offset..o * total_block + offset + block];
                            for (x, s) in acc[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *x += s;
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&in_shape, *axis);
                let len = out.shape()[*axis];
                let acc = slot(grads, *x, outer * dim * inner);
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    for (x, s) in acc[base..base + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *x += s;
                    }
                }
            }
            Op::Reshape(a) => {
                let acc = slot(grads, *a, g.len());
                for (x, s) in acc.iter_mut().zip(g) {
                    *x += s;
                }
            }
            Op::Permute { x, perm } => {
                let map = permute_index(self.shape(*x), perm);
                let acc = slot(grads, *x, g.len());
                for (j, &src) in map.iter().enumerate() {
                    acc[src] += g[j];
                }
            }
            Op::Dropout { x, mask } => {
                let acc = slot(grads, *x, g.len());
                for ((a, gj), m) in acc.iter_mut().zip(g).zip(mask) {
                    *a += gj * m;
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds `sign * g` into `v`'s gradient, summing over broadcast repeats.
    fn reduce_into(&self, v: Var, g: &[f64], sign: f64, grads: &mut [Option<Vec<f64>>]) {
        if !self.wants(v) {
            return;
        }
        let n = self.value(v).len();
        let acc = slot(grads, v, n);
        for (j, gj) in g.iter().enumerate() {
            acc[j % n] += sign * gj;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of a single row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut g = Graph::new();
        let a = random(&[3, 4], 1);
        let i3 = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let p = g.matmul(i3, av).unwrap();
        assert_eq!(g.value(p), &a);

        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        match g.matmul(a, b).unwrap_err() {
            TensorError::ShapeError { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn broadcasting_over_leading_dims() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2], &[10.0, 20.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sub(b, a).unwrap();
        assert_eq!(g.value(s).data(), &[9.0, 18.0, 7.0, 16.0]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.mul(a, bad).is_err());
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1]));
        let a = g.tanh(z);
        let b = g.sigmoid(z);
        assert_eq!(g.value(a).item(), 0.0);
        assert_eq!(g.value(b).item(), 0.5);
        let neg = g.constant(t(&[3], &[-0.5, -3.0, -1e-9]));
        let r = g.relu(neg);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1]));
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        let analytic = g.grad(x).unwrap().item();
        assert!((analytic - 0.25).abs() < 1e-15);
        let h = 1e-6;
        let fd = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
        assert!((analytic - fd).abs() < 1e-9);
    }

    #[test]
    fn softmax_laws() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let s = g.softmax(x);
        assert_eq!(g.value(s).data(), &[0.25; 4]);

        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(big);
        let v = g.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

        let base = random(&[3, 5], 4);
        let shifted = t(&[3, 5], &base.data().iter().map(|x| x + 7.5).collect::<Vec<_>>());
        let a = g.constant(base);
        let b = g.constant(shifted);
        let sa = g.softmax(a);
        let sb = g.softmax(b);
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in g.value(sa).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_constant_row_and_mean() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(random(&[3, 6], 9));
        let bias_t = random(&[6], 10);
        let bias_mean = bias_t.data().iter().sum::<f64>() / 6.0;
        let bias = g.constant(bias_t);
        let gain = g.constant(Tensor::ones(&[6]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for row in g.value(y).data().chunks(6) {
            let m = row.iter().sum::<f64>() / 6.0;
            assert!((m - bias_mean).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let x = random(&[3, 5], 11);
        let gain = random(&[5], 12);
        let bias = random(&[5], 13);
        let w = random(&[3, 5], 14);
        for which in 0..3 {
            let f = |v: &Tensor| {
                let mut g = Graph::new();
                let inputs = [x.clone(), gain.clone(), bias.clone()];
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { g.input(v.clone()) } else { g.constant(t.clone()) })
                    .collect();
                let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-6).unwrap();
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv).unwrap();
                let l = g.sum(p);
                (g, vars[which], l)
            };
            let at = [&x, &gain, &bias][which];
            assert!(finite_difference_check(f, at, 1e-5) < 1e-4, "input {which}");
        }
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let table = random(&[4, 3], 2);
        let mut g = Graph::new();
        let tv = g.input(table.clone());
        let e = g.embedding(tv, &[0]).unwrap();
        assert_eq!(g.value(e).data(), table.row(0));
        assert!(matches!(
            g.embedding(tv, &[4]).unwrap_err(),
            TensorError::IndexError { index: 4, bound: 4 }
        ));
        let e = g.embedding(tv, &[2, 2, 1]).unwrap();
        let l = g.sum(e);
        g.backward(l).unwrap();
        let grad = g.grad(tv).unwrap();
        assert_eq!(grad.row(2), &[2.0; 3]);
        assert_eq!(grad.row(1), &[1.0; 3]);
        assert_eq!(grad.row(0), &[0.0; 3]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let l = g.constant(t(&[1, 2], &[10.0, -10.0]));
        let loss = g.cross_entropy(l, &[0], &[1.0]).unwrap();
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-15);
        assert!(g.value(loss).item() < 3e-9);

        let u = g.constant(Tensor::zeros(&[2, 4]));
        let loss = g.cross_entropy(u, &[1, 3], &[1.0, 1.0]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let logits = random(&[3, 4], 5);
        let a = g.constant(logits.clone());
        let masked = g.cross_entropy(a, &[1, 2, 0], &[1.0, 1.0, 0.0]).unwrap();
        let mut other = logits.clone();
        other.data_mut()[8..].copy_from_slice(&[9.0, -9.0, 3.0, 1.0]);
        let b = g.constant(other);
        let masked2 = g.cross_entropy(b, &[1, 2, 3], &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.value(masked).item(), g.value(masked2).item());

        assert_eq!(
            g.cross_entropy(a, &[0, 0, 0], &[0.0; 3]).unwrap_err(),
            TensorError::EmptyLossError
        );
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = random(&[4, 5], 21);
        for smoothing in [0.0, 0.1] {
            let f = |v: &Tensor| {
                let mut g = Graph::new();
                let x = g.input(v.clone());
                let s = g.softmax(x);
                let l = g.cross_entropy_smoothed(s, &[0, 4, 2, 1], &[1.0, 1.0, 0.0, 1.0], smoothing).unwrap();
                (g, x, l)
            };
            assert!(finite_difference_check(f, &logits, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn backward_simple_laws() {
        let x0 = random(&[5], 3);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 5]);

        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        for (gr, v) in g.grad(x).unwrap().data().iter().zip(x0.data()) {
            assert!((gr - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarBackward(vec![2]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.backward(l).unwrap_err(), TensorError::BackwardTwice);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones(&[2])).unwrap();
        let b = store.add("b", Tensor::ones(&[3])).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let l = g.sum(av);
        g.backward(l).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[1].1.data(), &[0.0; 3]);
    }

    #[test]
    fn structural_ops_gradients() {
        let x0 = random(&[2, 3, 4], 31);
        let w = random(&[3, 2, 4], 32);
        let f = |v: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(v.clone());
            let p = g.permute(x, &[1, 0, 2]).unwrap();
            let a = g.narrow(p, 2, 1, 2).unwrap();
            let b = g.narrow(p, 2, 0, 2).unwrap();
            let c = g.concat(&[a, b], 2).unwrap();
            let r = g.reshape(c, &[3, 2, 4]).unwrap();
            let wv = g.constant(w.clone());
            let m = g.mul(r, wv).unwrap();
            let t = g.tanh(m);
            let l = g.mean(t);
            (g, x, l)
        };
        assert!(finite_difference_check(f, &x0, 1e-5) < 1e-4);
    }

    #[test]
    fn matmul_gradients() {
        let a0 = random(&[3, 4], 41);
        let b0 = random(&[4, 2], 42);
        let fa = |v: &Tensor| {
            let mut g = Graph::new();
            let a = g.input(v.clone());
            let b = g.constant(b0.clone());
            let p = g.matmul(a, b).unwrap();
            let s = g.sigmoid(p);
            let l = g.sum(s);
            (g, a, l)
        };
        assert!(finite_difference_check(fa, &a0, 1e-5) < 1e-4);
        let fb = |v: &Tensor| {
            let mut g = Graph::new();
            let a = g.constant(a0.clone());
            let b = g.input(v.clone());
            let p = g.matmul(a, b).unwrap();
            let s = g.sigmoid(p);
            let l = g.sum(s);
            (g, b, l)
        };
        assert!(finite_difference_check(fb, &b0, 1e-5) < 1e-4);
    }

    #[test]
    fn batch_matmul_gradients() {
        for trans_b in [false, true] {
            let a0 = random(&[2, 3, 4], 51);
            let b0 = if trans_b { random(&[2, 5, 4], 52) } else { random(&[2, 4, 5], 52) };
            for which in 0..2 {
                let f = |v: &Tensor| {
                    let mut g = Graph::new();
                    let (a, b) = if which == 0 {
                        (g.input(v.clone()), g.constant(b0.clone()))
                    } else {
                        (g.constant(a0.clone()), g.input(v.clone()))
                    };
                    let p = g.batch_matmul(a, b, trans_b).unwrap();
                    let s = g.tanh(p);
                    let l = g.sum(s);
                    (g, if which == 0 { a } else { b }, l)
                };
                let at = if which == 0 { &a0 } else { &b0 };
                assert!(finite_difference_check(f, at, 1e-5) < 1e-4, "trans_b={trans_b} which={which}");
            }
        }
    }

    #[test]
    fn batch_matmul_matches_matmul() {
        let a0 = random(&[1, 3, 4], 61);
        let b0 = random(&[1, 4, 2], 62);
        let mut g = Graph::new();
        let a = g.constant(a0.clone());
        let b = g.constant(b0.clone());
        let p = g.batch_matmul(a, b, false).unwrap();
        let a2 = g.constant(a0.reshaped(&[3, 4]).unwrap());
        let b2 = g.constant(b0.reshaped(&[4, 2]).unwrap());
        let q = g.matmul(a2, b2).unwrap();
        assert_eq!(g.value(p).data(), g.value(q).data());
    }

    #[test]
    fn dropout_is_seeded() {
        let run = |seed| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(&[50]));
            let y = g.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
            g.value(y).clone()
        };
        assert_eq!(run(1), run(1));
        assert!(run(1).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn broadcast_gradients() {
        let a0 = random(&[3, 4], 71);
        let b0 = random(&[4], 72);
        let f = |v: &Tensor| {
            let mut g = Graph::new();
            let a = g.constant(a0.clone());
            let b = g.input(v.clone());
            let s = g.mul(a, b).unwrap();
            let s2 = g.sub(s, b).unwrap();
            let s3 = g.add(b, s2).unwrap();
            let m = g.mul(s3, s3).unwrap();
            let l = g.sum(m);
            (g, b, l)
        };
        assert!(finite_difference_check(f, &b0, 1e-5) < 1e-4);
    }
}
