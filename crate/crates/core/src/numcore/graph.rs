//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node whose parents already exist, so node order
//! is a topological order and backward is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{self, Relation};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Concat(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    Reshape(Var),
    TransposeLast2(Var),
    ReduceSum(Var, Option<usize>),
    ReduceMean(Var, Option<usize>),
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Arc<[Option<usize>]>,
        weights: Arc<[f64]>,
        count: usize,
    },
    VectorAttention {
        q: Var,
        k: Var,
        v: Var,
        pos: Option<Var>,
        idx: Arc<[usize]>,
        kk: usize,
        rel: Relation,
        scale: f64,
        weights: Vec<f64>,
    },
    ScalarAttention {
        q: Var,
        k: Var,
        v: Var,
        idx: Arc<[usize]>,
        kk: usize,
        scale: f64,
        weights: Vec<f64>,
    },
    WeightedGather {
        x: Var,
        idx: Arc<[usize]>,
        w: Arc<[f64]>,
        kk: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a [.., m, k] x b [k, n] -> [.., m, n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sb, sa) {
            return Err(self.mismatch(op, a, b));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let len = vb.len();
        let out: Vec<f64> = va
            .chunks_exact(len)
            .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(sa.to_vec(), out))
    }

    /// Elementwise sum; either operand may broadcast over the other's leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if suffix_of(self.shape(b), self.shape(a)) {
            (a, b)
        } else {
            (b, a)
        };
        let t = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// `a - b`, with `b` broadcast over the leading dims of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// `a * b` elementwise, with `b` broadcast over the leading dims of `a`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("maximum", a, b));
        }
        let t = self.elementwise("maximum", a, b, f64::max)?;
        Ok(self.push(t, Op::Maximum(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * s).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Multiplies `x` by the single value held in `s` (a learnable scalar).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("scale_by", x, s));
        }
        let sv = self.value(s).item();
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * sv).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(t, Op::ScaleBy(x, s), &[x, s]))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.mismatch("concat_channels", a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.last_dim(), tb.last_dim());
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(a, b), &[a, b]))
    }

    /// Selects rows (first-axis slices) of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let t = self.value(x);
        if t.rank() == 0 || idx.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!(
                    "cannot gather {} rows from shape {:?}",
                    idx.len(),
                    t.shape()
                ),
            });
        }
        let rows = t.shape()[0];
        let width = t.len() / rows;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let src = t.data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(Tensor::from_parts(shape, out), Op::GatherRows(x, idx), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose_last2",
                msg: format!("rank {} < 2", s.len()),
            });
        }
        let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = t.len() / (a * b);
        let src = t.data();
        let mut out = vec![0.0; t.len()];
        for n in 0..batch {
            let off = n * a * b;
            for i in 0..a {
                for j in 0..b {
                    out[off + j * a + i] = src[off + i * b + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TransposeLast2(x), &[x]))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: Option<usize>) -> Result<()> {
        match axis {
            Some(a) if a >= self.shape(x).len() => Err(Error::InvalidShape {
                op,
                msg: format!("axis {a} out of range for {:?}", self.shape(x)),
            }),
            _ => Ok(()),
        }
    }

    fn sum_along(t: &Tensor, axis: Option<usize>) -> Tensor {
        match axis {
            None => Tensor::scalar(t.data().iter().sum()),
            Some(axis) => {
                let (outer, mid, inner) = split_axis(t.shape(), axis);
                let src = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                Tensor::from_parts(shape, out)
            }
        }
    }

    /// Sum over `axis`, or over everything to a scalar when `axis` is `None`.
    pub fn reduce_sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis("reduce_sum", x, axis)?;
        let t = Self::sum_along(self.value(x), axis);
        Ok(self.push(t, Op::ReduceSum(x, axis), &[x]))
    }

    pub fn reduce_mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis("reduce_mean", x, axis)?;
        let src = self.value(x);
        let count = match axis {
            None => src.len(),
            Some(a) => src.shape()[a],
        } as f64;
        let mut t = Self::sum_along(src, axis);
        t.data_mut().iter_mut().for_each(|v| *v /= count);
        Ok(self.push(t, Op::ReduceMean(x, axis), &[x]))
    }

    /// Max over `axis`; ties resolve to the lowest position.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reduce_max", x, Some(axis))?;
        let t = self.value(x);
        let (outer, mid, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                for m in 0..mid {
                    let at = (o * mid + m) * inner + i;
                    if src[at] > out[slot] || m == 0 {
                        out[slot] = src[at];
                        argmax[slot] = at;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ReduceMax { x, argmax },
            &[x],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 {
            return Err(Error::EmptyAxis("softmax_lastdim"));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Weighted mean negative log-likelihood over rows whose label is `Some`.
    ///
    /// The mean divides by the number of labelled rows, not by the weight sum.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: impl Into<Arc<[Option<usize>]>>,
        weights: impl Into<Arc<[f64]>>,
    ) -> Result<Var> {
        let labels: Arc<[Option<usize>]> = labels.into();
        let weights: Arc<[f64]> = weights.into();
        let t = self.value(logits);
        let c = t.last_dim();
        if t.rank() != 2 || t.rows() != labels.len() || weights.len() != c {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                msg: format!(
                    "logits {:?} with {} labels and {} class weights",
                    t.shape(),
                    labels.len(),
                    weights.len()
                ),
            });
        }
        if let Some((i, _)) = labels
            .iter()
            .enumerate()
            .find(|(_, l)| l.is_some_and(|l| l >= c))
        {
            return Err(Error::invalid(format!(
                "label at row {i} is >= {c} classes"
            )));
        }
        let count = labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every row is ignored".into()));
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (row, label) in probs.chunks_exact_mut(c).zip(labels.iter()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if let Some(y) = *label {
                total += weights[y] * (lse - row[y]);
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                weights,
                count,
            },
            &[logits],
        ))
    }

    /// Per-channel attention of each query row over `kk` gathered rows.
    ///
    /// `idx` is `[n, kk]` into the rows of `k`/`v`; `pos`, when given, is
    /// `[n * kk, d]` and is added to both the relation and the values.
    #[allow(clippy::too_many_arguments)]
    pub fn vector_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pos: Option<Var>,
        idx: impl Into<Arc<[usize]>>,
        kk: usize,
        rel: Relation,
        scale: f64,
    ) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        if kk == 0 {
            return Err(Error::EmptyAxis("vector_attention"));
        }
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || self.shape(v) != sk {
            return Err(self.mismatch("vector_attention", q, k));
        }
        let (n, d, m) = (sq[0], sq[1], sk[0]);
        if idx.len() != n * kk || idx.iter().any(|&r| r >= m) {
            return Err(Error::InvalidShape {
                op: "vector_attention",
                msg: format!(
                    "index table of {} entries for {n}x{kk} over {m} rows",
                    idx.len()
                ),
            });
        }
        if let Some(p) = pos {
            if self.shape(p) != [n * kk, d] {
                return Err(self.mismatch("vector_attention(pos)", q, p));
            }
        }
        let (out, weights) = kernels::vector_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            pos.map(|p| self.value(p).data()),
            &idx,
            n,
            kk,
            d,
            rel,
            scale,
        );
        let mut parents = vec![q, k, v];
        parents.extend(pos);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::VectorAttention {
                q,
                k,
                v,
                pos,
                idx,
                kk,
                rel,
                scale,
                weights,
            },
            &parents,
        ))
    }

    /// Scaled dot-product attention of each query row over `kk` gathered rows.
    pub fn scalar_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        idx: impl Into<Arc<[usize]>>,
        kk: usize,
        scale: f64,
    ) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        if kk == 0 {
            return Err(Error::EmptyAxis("scalar_attention"));
        }
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(self.mismatch("scalar_attention", q, k));
        }
        let (n, dq, m, dv) = (sq[0], sq[1], sk[0], sv[1]);
        if idx.len() != n * kk || idx.iter().any(|&r| r >= m) {
            return Err(Error::InvalidShape {
                op: "scalar_attention",
                msg: format!(
                    "index table of {} entries for {n}x{kk} over {m} rows",
                    idx.len()
                ),
            });
        }
        let (out, weights) = kernels::scalar_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &idx,
            n,
            kk,
            dq,
            dv,
            scale,
        );
        Ok(self.push(
            Tensor::from_parts(vec![n, dv], out),
            Op::ScalarAttention {
                q,
                k,
                v,
                idx,
                kk,
                scale,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// `out[i] = sum_j w[i, j] * x[idx[i, j]]` with constant weights.
    pub fn weighted_gather(
        &mut self,
        x: Var,
        idx: impl Into<Arc<[usize]>>,
        w: impl Into<Arc<[f64]>>,
        kk: usize,
    ) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let w: Arc<[f64]> = w.into();
        let t = self.value(x);
        if kk == 0 || t.rank() != 2 || idx.len() != w.len() || !idx.len().is_multiple_of(kk) {
            return Err(Error::InvalidShape {
                op: "weighted_gather",
                msg: format!("{} indices, {} weights, kk {kk}", idx.len(), w.len()),
            });
        }
        let (m, d) = (t.shape()[0], t.shape()[1]);
        if idx.iter().any(|&r| r >= m) {
            return Err(Error::invalid("weighted_gather: index out of range"));
        }
        let n = idx.len() / kk;
        let src = t.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..kk {
                let (r, wt) = (idx[i * kk + j], w[i * kk + j]);
                for (oc, xc) in o.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                    *oc += wt * xc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::WeightedGather { x, idx, w, kk },
            &[x],
        ))
    }

    /// Propagates d(loss)/d(node) back to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (k, n) = (sb[0], sb[1]);
                let m = numel(sa) / k;
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(b).data(),
                        (1, n as isize),
                        ga,
                        1.0,
                    );
                }
                if self.wants(b) {
                    let gb = self.slot(grads, b);
                    kernels::gemm(
                        k,
                        m,
                        n,
                        self.value(a).data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        gb,
                        1.0,
                    );
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(b) {
                    let gb = self.slot(grads, b);
                    let len = gb.len();
                    for chunk in g.chunks_exact(len) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let len = vb.len();
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    for (gc, gin) in ga.chunks_exact_mut(len).zip(g.chunks_exact(len)) {
                        for t in 0..len {
                            gc[t] += gin[t] * vb[t];
                        }
                    }
                }
                if self.wants(b) {
                    let gb = self.slot(grads, b);
                    for (gin, ac) in g.chunks_exact(len).zip(va.chunks_exact(len)) {
                        for t in 0..len {
                            gb[t] += gin[t] * ac[t];
                        }
                    }
                }
            }
            &Op::Maximum(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    for i in 0..g.len() {
                        if va[i] >= vb[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if self.wants(b) {
                    let gb = self.slot(grads, b);
                    for i in 0..g.len() {
                        if va[i] < vb[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                let gx = self.slot(grads, x);
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
            &Op::ScaleBy(x, s) => {
                let sv = self.value(s).item();
                if self.wants(x) {
                    let gx = self.slot(grads, x);
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += sv * b);
                }
                if self.wants(s) {
                    let dot: f64 = self.value(x).data().iter().zip(g).map(|(a, b)| a * b).sum();
                    self.slot(grads, s)[0] += dot;
                }
            }
            &Op::Concat(a, b) => {
                let (da, db) = (self.value(a).last_dim(), self.value(b).last_dim());
                let rows = g.len() / (da + db);
                if self.wants(a) {
                    let ga = self.slot(grads, a);
                    for r in 0..rows {
                        let src = &g[r * (da + db)..r * (da + db) + da];
                        ga[r * da..(r + 1) * da]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                if self.wants(b) {
                    let gb = self.slot(grads, b);
                    for r in 0..rows {
                        let src = &g[r * (da + db) + da..(r + 1) * (da + db)];
                        gb[r * db..(r + 1) * db]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let x = *x;
                let width = g.len() / idx.len();
                let gx = self.slot(grads, x);
                for (j, &i) in idx.iter().enumerate() {
                    gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[j * width..(j + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
            }
            &Op::Reshape(x) => {
                let gx = self.slot(grads, x);
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            &Op::TransposeLast2(x) => {
                let s = self.shape(x);
                let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (a * b);
                let gx = self.slot(grads, x);
                for n in 0..batch {
                    let off = n * a * b;
                    for i in 0..a {
                        for j in 0..b {
                            gx[off + i * b + j] += g[off + j * a + i];
                        }
                    }
                }
            }
            &Op::ReduceSum(x, axis) | &Op::ReduceMean(x, axis) => {
                let shape = self.shape(x).to_vec();
                let mean = matches!(node.op, Op::ReduceMean(..));
                let gx = self.slot(grads, x);
                match axis {
                    None => {
                        let v = if mean { g[0] / gx.len() as f64 } else { g[0] };
                        gx.iter_mut().for_each(|a| *a += v);
                    }
                    Some(axis) => {
                        let (outer, mid, inner) = split_axis(&shape, axis);
                        let f = if mean { 1.0 / mid as f64 } else { 1.0 };
                        for o in 0..outer {
                            for m in 0..mid {
                                let base = (o * mid + m) * inner;
                                for i in 0..inner {
                                    gx[base + i] += f * g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::ReduceMax { x, argmax } => {
                let gx = self.slot(grads, *x);
                for (slot, &at) in argmax.iter().enumerate() {
                    gx[at] += g[slot];
                }
            }
            &Op::Relu(x) => {
                let vx = self.value(x).data();
                let gx = self.slot(grads, x);
                for i in 0..g.len() {
                    if vx[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = self.slot(grads, x);
                for ((gr, yr), gxr) in g
                    .chunks_exact(d)
                    .zip(y.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for t in 0..d {
                        gxr[t] += yr[t] * (gr[t] - dot);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = self.slot(grads, *x);
                for (r, is) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (t, out) in gx[span].iter_mut().enumerate() {
                        *out += is * (gr[t] - mean_g - yr[t] * mean_gy);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                weights,
                count,
            } => {
                let c = weights.len();
                let scale = g[0] / *count as f64;
                let gl = self.slot(grads, *logits);
                for (r, label) in labels.iter().enumerate() {
                    if let Some(y) = *label {
                        let w = weights[y] * scale;
                        let row = &mut gl[r * c..(r + 1) * c];
                        for t in 0..c {
                            row[t] += w * probs[r * c + t];
                        }
                        row[y] -= w;
                    }
                }
            }
            Op::VectorAttention {
                q,
                k,
                v,
                pos,
                idx,
                kk,
                rel,
                scale,
                weights,
            } => {
                let (n, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; self.value(*k).len()];
                let mut gv = vec![0.0; self.value(*v).len()];
                let mut gp = pos.map(|_| vec![0.0; n * kk * d]);
                kernels::vector_attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    pos.map(|p| self.value(p).data()),
                    weights,
                    idx,
                    n,
                    *kk,
                    d,
                    *rel,
                    *scale,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                    gp.as_deref_mut(),
                );
                self.accumulate(grads, *q, &gq);
                self.accumulate(grads, *k, &gk);
                self.accumulate(grads, *v, &gv);
                if let (Some(p), Some(gp)) = (pos, gp) {
                    self.accumulate(grads, *p, &gp);
                }
            }
            Op::ScalarAttention {
                q,
                k,
                v,
                idx,
                kk,
                scale,
                weights,
            } => {
                let (n, dq) = (self.shape(*q)[0], self.shape(*q)[1]);
                let dv = self.shape(*v)[1];
                let mut gq = vec![0.0; n * dq];
                let mut gk = vec![0.0; self.value(*k).len()];
                let mut gv = vec![0.0; self.value(*v).len()];
                kernels::scalar_attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    weights,
                    idx,
                    n,
                    *kk,
                    dq,
                    dv,
                    *scale,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                self.accumulate(grads, *q, &gq);
                self.accumulate(grads, *k, &gk);
                self.accumulate(grads, *v, &gv);
            }
            Op::WeightedGather { x, idx, w, kk } => {
                let d = self.shape(*x)[1];
                let gx = self.slot(grads, *x);
                for (ij, (&r, &wt)) in idx.iter().zip(w.iter()).enumerate() {
                    let i = ij / kk;
                    let go = &g[i * d..(i + 1) * d];
                    for (a, b) in gx[r * d..(r + 1) * d].iter_mut().zip(go) {
                        *a += wt * b;
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.wants(v) {
            let slot = self.slot(grads, v);
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}
