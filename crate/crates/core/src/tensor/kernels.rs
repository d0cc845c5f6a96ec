use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `src` viewed inside `out`, with zero stride on broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Walks an output shape and yields the matching flat index of a broadcast source.
pub(crate) struct BroadcastIndex {
    out: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastIndex {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        BroadcastIndex {
            out: out.to_vec(),
            src_strides: broadcast_strides(src, out),
        }
    }

    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.out.iter().product();
        if n == 0 {
            return;
        }
        let r = self.out.len();
        let mut idx = vec![0usize; r];
        let mut src = 0usize;
        for o in 0..n {
            f(o, src);
            for d in (0..r).rev() {
                idx[d] += 1;
                src += self.src_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                src -= self.src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Index pairs for a binary broadcast op.
pub(crate) fn binary_index(
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let out = broadcast_shape(a, b)?;
    let mut ia = Vec::with_capacity(out.iter().product());
    let mut ib = Vec::with_capacity(ia.capacity());
    if a == out.as_slice() && b == out.as_slice() {
        let n = ia.capacity();
        return Ok((out, (0..n).collect(), (0..n).collect()));
    }
    BroadcastIndex::new(a, &out).for_each(|_, s| ia.push(s));
    BroadcastIndex::new(b, &out).for_each(|_, s| ib.push(s));
    Ok((out, ia, ib))
}

/// `c[m,p] += a[m,k] * b[k,p]`, summing over `k` in increasing order.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, p: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,p] += a[m,k] * b[p,k]^T`.
pub(crate) fn gemm_acc_bt<T: Scalar>(m: usize, k: usize, p: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * p + j] += s;
        }
    }
}

/// `c[k,p] += a[m,k]^T * b[m,p]`.
pub(crate) fn gemm_acc_at<T: Scalar>(m: usize, k: usize, p: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Batch layout of a (possibly broadcast) batched matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub out_shape: Vec<usize>,
    /// For each output batch: (a offset, b offset) in matrices.
    pub pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape(ab, bb).map_err(|_| Error::shape("matmul", a, b))?;
        let mut ia = Vec::new();
        let mut ib = Vec::new();
        BroadcastIndex::new(ab, &batch).for_each(|_, s| ia.push(s));
        BroadcastIndex::new(bb, &batch).for_each(|_, s| ib.push(s));
        if batch.is_empty() {
            ia = vec![0];
            ib = vec![0];
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(p);
        Ok(MatmulPlan {
            m,
            k,
            p,
            out_shape,
            pairs: ia.into_iter().zip(ib).collect(),
        })
    }
}

pub(crate) fn matmul_forward<T: Scalar>(plan: &MatmulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, p) = (plan.m, plan.k, plan.p);
    let mut out = vec![T::zero(); plan.pairs.len() * m * p];
    for (bi, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm_acc(
            m,
            k,
            p,
            &a[ia * m * k..(ia + 1) * m * k],
            &b[ib * k * p..(ib + 1) * k * p],
            &mut out[bi * m * p..(bi + 1) * m * p],
        );
    }
    out
}

/// Matmul without recording anything.
pub fn matmul_plain<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let data = matmul_forward(&plan, a.data(), b.data());
    Tensor::new(&plan.out_shape, data)
}

/// Permutes axes of `data` with `shape`; returns the new data.
pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let r = out_shape.len();
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..r).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}
