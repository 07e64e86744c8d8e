use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm_acc, split_axis, transpose};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weighted neighbor lists: row `v` holds `(u, w_vu)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub rows: Vec<Vec<(usize, f64)>>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: T },
    Sigmoid { a: Var },
    Gelu { a: Var },
    Relu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    L2NormalizeRows { a: Var, norms: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Narrow { a: Var, axis: usize, start: usize },
    Expand { a: Var, axis: usize },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
    NeighborAggregate { a: Var, adjacency: Arc<Adjacency> },
    BceWithLogits { logits: Var, targets: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | BatchMatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => {
                vec![*a, *b]
            }
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Concat { inputs, .. } => inputs.clone(),
            BceWithLogits { logits, .. } => vec![*logits],
            Affine { a, .. }
            | Sigmoid { a }
            | Gelu { a }
            | Relu { a }
            | Softmax { a }
            | LogSoftmax { a }
            | SumAxis { a, .. }
            | MeanAxis { a, .. }
            | SumAll { a }
            | MeanAll { a }
            | L2NormalizeRows { a, .. }
            | Dropout { a, .. }
            | Reshape { a }
            | Permute { a, .. }
            | Narrow { a, .. }
            | Expand { a, .. }
            | IndexSelect { a, .. }
            | NeighborAggregate { a, .. } => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul { .. } => "matmul",
            BatchMatMul { .. } => "batch_matmul",
            Add { .. } => "add",
            Sub { .. } => "sub",
            Mul { .. } => "mul",
            Affine { .. } => "affine",
            Sigmoid { .. } => "sigmoid",
            Gelu { .. } => "gelu",
            Relu { .. } => "relu",
            LayerNorm { .. } => "layer_norm",
            Softmax { .. } => "softmax",
            LogSoftmax { .. } => "log_softmax",
            SumAxis { .. } => "sum_axis",
            MeanAxis { .. } => "mean_axis",
            SumAll { .. } => "sum",
            MeanAll { .. } => "mean",
            Concat { .. } => "concat",
            L2NormalizeRows { .. } => "l2_normalize_rows",
            Dropout { .. } => "dropout",
            Reshape { .. } => "reshape",
            Permute { .. } => "permute",
            Narrow { .. } => "narrow",
            Expand { .. } => "expand",
            IndexSelect { .. } => "index_select",
            NeighborAggregate { .. } => "neighbor_aggregate",
            BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// tape order is already a topological order of the DAG.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by one call to [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, or zeros when no path reaches it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn collect(&self, bound: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor<T>> {
        bound
            .iter()
            .map(|(name, &v)| (name.clone(), self.get_or_zeros(v)))
            .collect()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    /// New graph. `training` enables dropout; `seed` drives every random draw.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records every tensor of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &BTreeMap<String, Tensor<T>>) -> Result<BTreeMap<String, Var>> {
        params
            .iter()
            .map(|(name, t)| Ok((name.clone(), self.param(t.clone())?)))
            .collect()
    }

    // ---- linear algebra ----

    /// `a[.., m, k] x b[k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b })
    }

    /// Batched product over leading dims: `a[.., m, k] x b[.., k, n]`, or
    /// `a x b^T` with `b[.., n, k]` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})")));
        }
        let groups: usize = sa[..r - 2].iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            let ag = &av[g * m * k..(g + 1) * m * k];
            let bg = &bv[g * k * n..(g + 1) * k * n];
            let cg = &mut out[g * m * n..(g + 1) * m * n];
            if transpose_b {
                gemm_acc(ag, &transpose(bg, n, k), cg, m, k, n);
            } else {
                gemm_acc(ag, bg, cg, m, k, n);
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(Tensor::new(shape, out)?, Op::BatchMatMul { a, b, transpose_b })
    }

    // ---- elementwise ----

    /// `b` must match `a`, be a suffix of `a`'s shape (leading-dim
    /// expansion), or hold a single element.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = self.value(b).numel();
        if nb == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let bv = self.value(b).data();
        let nb = bv.len();
        self.value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b })
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::of(scale), T::of(shift));
        let out: Vec<T> = self.value(a).data().iter().map(|&x| s * x + t).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Affine { a, scale: s })
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid { a })
    }

    /// GELU with the tanh approximation (see [`kernels::gelu`]).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu { a })
    }

    // ---- normalization ----

    /// Per-row normalization over the last dim, then `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("last dim {d}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Divides each last-dim row by its L2 norm. Rows with norm below
    /// `eps` are an error: a zero vector has no direction.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(a).last().ok_or_else(|| Error::shape("l2_normalize_rows", "rank-0 input"))?;
        let av = self.value(a).data();
        let mut norms = Vec::with_capacity(av.len() / d.max(1));
        let mut out = Vec::with_capacity(av.len());
        for row in av.chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.f64() < eps {
                return Err(Error::InvalidArgument(format!(
                    "l2_normalize_rows: row norm {} below eps {eps}",
                    n.f64()
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::L2NormalizeRows { a, norms })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.softmax_rows(a, false);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax { a })
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.softmax_rows(a, true);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax { a })
    }

    fn softmax_rows(&self, a: Var, log: bool) -> Vec<T> {
        let d = *self.shape(a).last().unwrap_or(&1);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(av.len());
        for row in av.chunks(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                out.extend(row.iter().map(|&v| v - lse));
            } else {
                out.extend(row.iter().map(|&v| (v - max).exp() / sum));
            }
        }
        out
    }

    // ---- reductions ----

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", self.shape(a))));
        }
        Ok(())
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> (Vec<T>, Vec<usize>) {
        let shape = self.shape(a);
        let (outer, len, inner) = split_axis(shape, axis);
        let av = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if mean {
            let n = T::of(len as f64);
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let mut s = shape.to_vec();
        s.remove(axis);
        (out, s)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let (out, shape) = self.reduce_axis(a, axis, false);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { a, axis })
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let (out, shape) = self.reduce_axis(a, axis, true);
        self.push(Tensor::new(shape, out)?, Op::MeanAxis { a, axis })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    /// Sum of all elements divided by their count.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data();
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { a })
    }

    // ---- structural ----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        self.push(Tensor::new(out_shape, out)?, Op::Permute { a, perm: perm.to_vec() })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        self.push(Tensor::new(s, out)?, Op::Narrow { a, axis, start })
    }

    /// Repeats a size-1 `axis` `times` times.
    pub fn expand(&mut self, a: Var, axis: usize, times: usize) -> Result<Var> {
        self.check_axis("expand", a, axis)?;
        let shape = self.shape(a).to_vec();
        if shape[axis] != 1 {
            return Err(Error::shape("expand", format!("axis {axis} of {shape:?} is not 1")));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&av[o * inner..(o + 1) * inner]);
            }
        }
        let mut s = shape;
        s[axis] = times;
        self.push(Tensor::new(s, out)?, Op::Expand { a, axis })
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("index_select", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, alen, inner) = split_axis(&shape, axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= alen) {
            return Err(Error::shape("index_select", format!("index {bad} >= {alen}")));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * alen + i) * inner;
                out.extend_from_slice(&av[base..base + inner]);
            }
        }
        let mut s = shape;
        s[axis] = indices.len();
        self.push(Tensor::new(s, out)?, Op::IndexSelect { a, axis, indices: indices.to_vec() })
    }

    /// `out[.., v, :] = sum_u w_vu * a[.., u, :]` over the second-to-last axis.
    pub fn neighbor_aggregate(&mut self, a: Var, adjacency: Arc<Adjacency>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != adjacency.rows.len() {
            return Err(Error::shape(
                "neighbor_aggregate",
                format!("{shape:?} with {} graph nodes", adjacency.rows.len()),
            ));
        }
        let (m, d) = (shape[r - 2], shape[r - 1]);
        let outer = shape[..r - 2].iter().product::<usize>();
        let av = self.value(a).data();
        let mut out = vec![T::zero(); av.len()];
        for o in 0..outer {
            let block = &av[o * m * d..(o + 1) * m * d];
            for (v, row) in adjacency.rows.iter().enumerate() {
                let dst = &mut out[(o * m + v) * d..(o * m + v + 1) * d];
                for &(u, w) in row {
                    let w = T::of(w);
                    for (x, &s) in dst.iter_mut().zip(&block[u * d..(u + 1) * d]) {
                        *x += w * s;
                    }
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::NeighborAggregate { a, adjacency })
    }

    // ---- stochastic ----

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1 / (1 - rate)`. Identity at inference or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout { a, mask })
    }

    // ---- losses ----

    /// Elementwise binary cross-entropy on logits against constant targets,
    /// in the stable form `max(x, 0) - x y + log(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let out: Vec<T> = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .collect();
        let shape = self.shape(logits).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
        )
    }

    // ---- reverse mode ----

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_scaled(loss, 1.0)
    }

    /// Like [`Graph::backward`] with the seed gradient set to `seed`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let any_trainable = self.nodes.iter().any(|n| matches!(n.op, Op::Leaf) && n.requires_grad);
        if !any_trainable {
            return Err(Error::Backward("no trainable leaves".into()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss is detached from every trainable leaf".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::of(seed)]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, ig) in self.vjp(id, &g) {
                if self.nodes[input.0].requires_grad {
                    add_into(&mut grads[input.0], ig);
                }
            }
            // Interior grads are not needed after propagation; keep the slot
            // so callers can still inspect activations' grads.
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn vjp(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let sb = shp(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = val(*a).len() / k.max(1);
                let mut ga = vec![T::zero(); m * k];
                gemm_acc(g, &transpose(val(*b), k, n), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                gemm_acc(&transpose(val(*a), m, k), g, &mut gb, k, m, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = shp(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = node.value.shape()[r - 1];
                let groups: usize = sa[..r - 2].iter().product();
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for grp in 0..groups {
                    let ag = &av[grp * m * k..(grp + 1) * m * k];
                    let bg = &bv[grp * k * n..(grp + 1) * k * n];
                    let gg = &g[grp * m * n..(grp + 1) * m * n];
                    let ga_g = &mut ga[grp * m * k..(grp + 1) * m * k];
                    let gb_g = &mut gb[grp * k * n..(grp + 1) * k * n];
                    if *transpose_b {
                        // C = A B^T with B [n, k]: dA = dC B, dB = dC^T A.
                        gemm_acc(gg, bg, ga_g, m, n, k);
                        gemm_acc(&transpose(gg, m, n), ag, gb_g, n, m, k);
                    } else {
                        gemm_acc(gg, &transpose(bg, k, n), ga_g, m, n, k);
                        gemm_acc(&transpose(ag, m, k), gg, gb_g, k, m, n);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let nb = val(*b).len();
                let mut gb = vec![T::zero(); nb];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += gi;
                }
                if matches!(node.op, Op::Sub { .. }) {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = vec![T::zero(); nb];
                for (i, &gi) in g.iter().enumerate() {
                    ga.push(gi * bv[i % nb]);
                    gb[i % nb] += gi * av[i];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Affine { a, scale } => vec![(*a, g.iter().map(|&x| x * *scale).collect())],
            Op::Sigmoid { a } => {
                vec![(*a, g.iter().zip(out).map(|(&gi, &y)| gi * y * (T::one() - y)).collect())]
            }
            Op::Gelu { a } => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(&gi, &x)| gi * kernels::gelu_grad(x)).collect(),
            )],
            Op::Relu { a } => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                    .collect(),
            )],
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = shp(*gain)[0];
                let dt = T::of(d as f64);
                let gv = val(*gain);
                let mut gx = Vec::with_capacity(g.len());
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    mean_dh = mean_dh / dt;
                    mean_dh_h = mean_dh_h / dt;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        gx.push(rs * (dh - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
            }
            Op::Softmax { a } => {
                let d = *shp(*a).last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(out.chunks(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax { a } => {
                let d = *shp(*a).last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(out.chunks(d)) {
                    let total: T = gr.iter().copied().sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| x - y.exp() * total));
                }
                vec![(*a, ga)]
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = split_axis(shp(*a), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::of(len as f64)
                } else {
                    T::one()
                };
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        ga.extend(src.iter().map(|&x| x * scale));
                    }
                }
                vec![(*a, ga)]
            }
            Op::SumAll { a } => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::MeanAll { a } => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / T::of(n as f64); n])]
            }
            Op::Concat { inputs, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<Vec<T>> =
                    inputs.iter().map(|&v| Vec::with_capacity(val(v).len())).collect();
                for o in 0..outer {
                    let mut offset = o * total * inner;
                    for (p, &v) in inputs.iter().enumerate() {
                        let len = shp(v)[*axis] * inner;
                        parts[p].extend_from_slice(&g[offset..offset + len]);
                        offset += len;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::L2NormalizeRows { a, norms } => {
                let d = *shp(*a).last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(d).zip(out.chunks(d)).zip(norms) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| (x - y * dot) / n));
                }
                vec![(*a, ga)]
            }
            Op::Dropout { a, mask } => vec![(*a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect())],
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Permute { a, perm } => {
                let (ga, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_permutation(perm));
                vec![(*a, ga)]
            }
            Op::Narrow { a, axis, start } => {
                let (outer, alen, inner) = split_axis(shp(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![T::zero(); outer * alen * inner];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, ga)]
            }
            Op::Expand { a, axis } => {
                let times = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(shp(*a), *axis);
                let mut ga = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for t in 0..times {
                        let src = &g[(o * times + t) * inner..(o * times + t + 1) * inner];
                        for (x, &s) in ga[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::IndexSelect { a, axis, indices } => {
                let (outer, alen, inner) = split_axis(shp(*a), *axis);
                let mut ga = vec![T::zero(); outer * alen * inner];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &g[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner];
                        let dst = (o * alen + i) * inner;
                        for (x, &s) in ga[dst..dst + inner].iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::NeighborAggregate { a, adjacency } => {
                let shape = shp(*a);
                let r = shape.len();
                let (m, d) = (shape[r - 2], shape[r - 1]);
                let outer = g.len() / (m * d).max(1);
                let mut ga = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for (v, row) in adjacency.rows.iter().enumerate() {
                        let src = &g[(o * m + v) * d..(o * m + v + 1) * d];
                        for &(u, w) in row {
                            let w = T::of(w);
                            let dst = &mut ga[(o * m + u) * d..(o * m + u + 1) * d];
                            for (x, &s) in dst.iter_mut().zip(src) {
                                *x += w * s;
                            }
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::BceWithLogits { logits, targets } => vec![(
                *logits,
                g.iter()
                    .zip(val(*logits))
                    .zip(targets)
                    .map(|((&gi, &x), &y)| gi * (kernels::sigmoid(x) - y))
                    .collect(),
            )],
        }
    }
}
