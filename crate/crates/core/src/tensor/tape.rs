use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, binary_index, gemm_acc_at, gemm_acc_bt, MatmulPlan};
use super::{Tensor, MASK_VALUE};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<Option<usize>>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        eps: T,
        count: usize,
    },
    StraightThrough {
        x: Var,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Sum { x }
            | Op::StraightThrough { x } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a computation. Parents always precede children, so
/// reverse insertion order is a valid topological order for backward.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the original vars.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates; nothing requires grad.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.push_raw(t, Op::Leaf, needs_grad)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad =
            self.grad_enabled && op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let data = kernels::matmul_forward(&plan, self.value(a).data(), self.value(b).data());
        let value = Tensor::new(&plan.out_shape, data)?;
        self.push("matmul", value, Op::MatMul { a, b, plan })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Var, Var)> {
        let (shape, ia, ib) = binary_index(self.shape(a), self.shape(b))
            .map_err(|_| Error::shape(name, self.shape(a), self.shape(b)))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::new(&shape, data)?, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, a, b) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, a, b) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, a, b) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        self.push("scale", v, Op::Scale { x, c })
    }

    /// Softmax along `axis`, optionally after adding a broadcastable additive mask.
    ///
    /// Rows where every mask entry is blocked come out as zeros.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Tensor<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let mask = match mask {
            Some(m) => Some(m.broadcast_to(&shape)?),
            None => None,
        };
        let value = softmax_values(
            self.value(x).data(),
            &shape,
            axis,
            mask.as_ref().map(|m| m.data()),
        );
        self.push(
            "softmax",
            Tensor::new(&shape, value)?,
            Op::Softmax { x, axis },
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().unwrap_or(&0);
        if e == 0 {
            return Err(Error::invalid("layer_norm over an empty axis"));
        }
        if self.shape(gain) != [e] || self.shape(bias) != [e] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let eps = T::lit(eps);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / e;
        let en = T::lit(e as f64);
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * e..(r + 1) * e];
            let mean = row.iter().copied().sum::<T>() / en;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / en;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..e {
                let h = (row[j] - mean) * rs;
                xhat[r * e + j] = h;
                out[r * e + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push("relu", v, Op::Relu { x })
    }

    /// Gathers rows of `table` ([V, e]); output shape is `ids_shape + [e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid("embedding table must be 2-d"));
        }
        let (vocab, e) = (ts[0], ts[1]);
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::invalid("ids do not match ids_shape"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(e);
        let value = Tensor::new(&shape, data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Treats `x` as rows of its last-axis width and gathers `idx` rows
    /// (`None` yields a zero row). The result is reshaped to `out_shape`.
    pub fn gather_rows(
        &mut self,
        x: Var,
        idx: &[Option<usize>],
        out_shape: &[usize],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let w = *xs
            .last()
            .ok_or_else(|| Error::invalid("gather_rows on a scalar"))?;
        let rows = self.value(x).numel().checked_div(w).unwrap_or(0);
        if out_shape.iter().product::<usize>() != idx.len() * w {
            return Err(Error::shape("gather_rows", &[idx.len(), w], out_shape));
        }
        if let Some(bad) = idx.iter().flatten().find(|&&r| r >= rows) {
            return Err(Error::invalid(format!(
                "gather row {bad} out of range ({rows} rows)"
            )));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * w);
        for r in idx {
            match r {
                Some(r) => data.extend_from_slice(&xd[r * w..(r + 1) * w]),
                None => data.extend(std::iter::repeat_n(T::zero(), w)),
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "bad permutation {perm:?} for rank {}",
                shape.len()
            )));
        }
        let data = kernels::permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let v = Tensor::new(&out_shape, data)?;
        self.push(
            "permute",
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean label-smoothed cross-entropy over the rows whose target is `Some`.
    /// `logits` is read as rows of its last axis.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape
            .last()
            .ok_or_else(|| Error::invalid("cross_entropy on a scalar"))?;
        let rows = self.value(logits).numel() / v.max(1);
        if targets.len() != rows {
            return Err(Error::invalid(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy with zero counted tokens"));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::invalid(format!(
                "target {bad} out of range for {v} classes"
            )));
        }
        let eps_t = T::lit(eps);
        let vt = T::lit(v as f64);
        let ld = self.value(logits).data();
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let lp = log_softmax_row(&ld[r * v..(r + 1) * v]);
            let smooth: T = lp.iter().copied().sum::<T>() / vt;
            total -= (T::one() - eps_t) * lp[t] + eps_t * smooth;
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps: eps_t,
                count,
            },
        )
    }

    /// Forward: `1` where `x >= threshold`, else `0`. Backward: identity.
    pub fn binarize_straight_through(&mut self, x: Var, threshold: T) -> Result<Var> {
        let v = self
            .value(x)
            .map(|e| if e >= threshold { T::one() } else { T::zero() });
        self.push("binarize", v, Op::StraightThrough { x })
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)` in training,
    /// identity otherwise.
    pub fn dropout<R: rand::Rng>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            for p in node.op.parents() {
                if p.0 >= id {
                    return Err(Error::Autodiff(format!(
                        "node {id} refers to non-preceding node {}",
                        p.0
                    )));
                }
            }
            if matches!(node.op, Op::Leaf) {
                out.insert(Var(id), Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (m, k, p) = (plan.m, plan.k, plan.p);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        gemm_acc_bt(
                            m,
                            p,
                            k,
                            &g[bi * m * p..(bi + 1) * m * p],
                            &bv[ib * k * p..(ib + 1) * k * p],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        gemm_acc_at(
                            m,
                            k,
                            p,
                            &av[ia * m * k..(ia + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[ib * k * p..(ib + 1) * k * p],
                        );
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let (_, ia, ib) = binary_index(self.shape(*a), self.shape(*b))?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let kind = match node.op {
                    Op::Add { .. } => 0,
                    Op::Sub { .. } => 1,
                    _ => 2,
                };
                self.accumulate(grads, *a, |ga| {
                    for (o, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                        ga[i] += if kind == 2 { g[o] * bv[j] } else { g[o] };
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (o, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                        gb[j] += match kind {
                            0 => g[o],
                            1 => -g[o],
                            _ => g[o] * av[i],
                        };
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, |gx| {
                    for (d, &o) in gx.iter_mut().zip(g) {
                        *d += o * *c;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let k = base + j * inner;
                                dot += g[k] * y[k];
                            }
                            for j in 0..len {
                                let k = base + j * inner;
                                gx[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let e = *node.value.shape().last().unwrap();
                let gv = self.value(*gain).data();
                let rows = xhat.len() / e;
                let en = T::lit(e as f64);
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let s = r * e;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..e {
                            let dh = g[s + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[s + j];
                        }
                        m1 /= en;
                        m2 /= en;
                        for j in 0..e {
                            let dh = g[s + j] * gv[j];
                            gx[s + j] += rstd[r] * (dh - m1 - xhat[s + j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..rows {
                        for j in 0..e {
                            gg[j] += g[r * e + j] * xhat[r * e + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for r in 0..rows {
                        for j in 0..e {
                            gb[j] += g[r * e + j];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &o), &s) in gx.iter_mut().zip(g).zip(y) {
                        *d += o * s * (T::one() - s);
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &o), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += o;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let e = *self.shape(*table).last().unwrap();
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..e {
                            gt[i * e + j] += g[r * e + j];
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                let w = *self.shape(*x).last().unwrap();
                self.accumulate(grads, *x, |gx| {
                    for (r, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            for j in 0..w {
                                gx[s * w + j] += g[r * w + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } | Op::StraightThrough { x } => {
                self.accumulate(grads, *x, |gx| {
                    for (d, &o) in gx.iter_mut().zip(g) {
                        *d += o;
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = kernels::permute_data(g, node.value.shape(), &inv);
                self.accumulate(grads, *x, |gx| {
                    for (d, o) in gx.iter_mut().zip(back) {
                        *d += o;
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                eps,
                count,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let ld = self.value(*logits).data();
                let scale = g[0] / T::lit(*count as f64);
                let uni = *eps / T::lit(v as f64);
                self.accumulate(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let lp = log_softmax_row(&ld[r * v..(r + 1) * v]);
                        for j in 0..v {
                            let q = if j == t { T::one() - *eps + uni } else { uni };
                            gl[r * v + j] += scale * (lp[j].exp() - q);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    row.iter().map(|&v| v - lse).collect()
}

fn softmax_values<T: Scalar>(x: &[T], shape: &[usize], axis: usize, mask: Option<&[T]>) -> Vec<T> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let blocked = T::lit(MASK_VALUE / 2.0);
    let mut out = vec![T::zero(); x.len()];
    let mut z = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut open = false;
            for j in 0..len {
                let k = base + j * inner;
                let m = mask.map_or(T::zero(), |m| m[k]);
                open |= m > blocked;
                z[j] = x[k] + m;
            }
            if !open || len == 0 {
                continue;
            }
            let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for zj in z.iter_mut() {
                *zj = (*zj - mx).exp();
                s += *zj;
            }
            for j in 0..len {
                out[base + j * inner] = z[j] / s;
            }
        }
    }
    out
}

/// Row-wise log-softmax of a tensor's last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let v = *x.shape().last().unwrap_or(&1);
    let data = x
        .data()
        .chunks(v.max(1))
        .flat_map(log_softmax_row)
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}
