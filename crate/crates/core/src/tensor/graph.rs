use std::collections::HashMap;

use super::kernels;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddScalar(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Concat {
        inputs: Vec<Var>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    L2Normalize {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        norms: Vec<T>,
        eps: T,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<Option<usize>>,
        classes: usize,
        count: usize,
    },
    Bilinear {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        oh: usize,
        ow: usize,
    },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of a cross-entropy evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// Number of non-ignored positions that entered the mean.
    pub counted: usize,
}

impl LossOutput {
    /// Every position carried the ignore label; the loss is then defined as 0.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

/// Gradients of a scalar with respect to the graph's leaves.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::variable`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// Gradients of every parameter reached by the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|(id, node)| self.leaves.get(node).map(|g| (*id, g.as_slice())))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.leaves.get(node))
            .map(Vec::as_slice)
    }
}

/// Tape of executed operations. Values are computed eagerly while recording;
/// [`Graph::backward`] replays the tape in reverse.
///
/// Parameters are borrowed from a [`ParamStore`], so recording a forward pass
/// never copies weights. The tape is consumed by [`Graph::backward`]; use
/// [`Graph::gradients`] to keep it for another pass.
pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&p.value),
            op: Op::Param,
            requires_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(shape_err("matmul", ta.shape(), tb.shape())),
        };
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = match (ta.dims2(), tb.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(shape_err("matmul_nt", ta.shape(), tb.shape())),
        };
        if k != k2 {
            return Err(shape_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Elementwise sum of equal shapes; a single-element `b` broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| *x + *y)
                .collect();
            let t = Tensor::new(ta.shape(), data)?;
            Ok(self.push(t, Op::Add(a, b), rg))
        } else if tb.numel() == 1 {
            let s = tb.data()[0];
            let t = ta.map(|x| x + s);
            Ok(self.push(t, Op::AddScalar(a, b), rg))
        } else {
            Err(shape_err("add", ta.shape(), tb.shape()))
        }
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims2()?;
        if tr.numel() != n || tr.ndim() != 1 {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (o, r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += *r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant mask (e.g. dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(shape_err("mul_const", ta.shape(), &[mask.len()]));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, mask), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Softmax along `axis`, with max subtraction. NaN inputs propagate.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.ndim() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                ta.shape()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(ta.shape(), axis);
        let t = Tensor::new(ta.shape(), kernels::softmax(ta.data(), outer, len, inner))?;
        let rg = self.rg(a);
        Ok(self.push(
            t,
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis followed by the affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        if tg.numel() != n || tb.numel() != n {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / n;
        let eps = T::of(eps);
        let inv_n = T::one() / T::of(n as f64);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu_value);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Gelu(a), rg))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *inputs
                    .first()
                    .ok_or_else(|| Error::contract("concat of nothing"))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in inputs.iter().zip(&sizes) {
                let d = self.value(*v).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                sizes,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() || start + len > tx.shape()[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (outer, len_in, inner) = kernels::axis_split(tx.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Slice {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Scales every slice along `axis` to unit L2 norm; norms below `eps` are clamped to `eps`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(Error::contract(format!(
                "l2_normalize axis {axis} out of range"
            )));
        }
        let eps = T::of(eps);
        let (outer, len, inner) = kernels::axis_split(tx.shape(), axis);
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); tx.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let ss: T = (0..len)
                    .map(|j| tx.data()[idx(j)] * tx.data()[idx(j)])
                    .sum();
                let n = ss.sqrt().max(eps);
                norms[o * inner + i] = n;
                for j in 0..len {
                    out[idx(j)] = tx.data()[idx(j)] / n;
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                norms,
                eps,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `M×K` logits against `M` labels, skipping positions
    /// labelled `ignore_index`. If every position is ignored the loss is 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore_index: u8,
    ) -> Result<LossOutput> {
        let tl = self.value(logits);
        let (m, k) = tl.dims2()?;
        if labels.len() != m {
            return Err(shape_err("cross_entropy", tl.shape(), &[labels.len()]));
        }
        let mut parsed = Vec::with_capacity(m);
        for (i, &l) in labels.iter().enumerate() {
            if l == ignore_index {
                parsed.push(None);
            } else if (l as usize) < k {
                parsed.push(Some(l as usize));
            } else {
                return Err(Error::contract(format!(
                    "label {l} at position {i} outside [0, {k}) and not the ignore index"
                )));
            }
        }
        let probs = kernels::softmax(tl.data(), m, k, 1);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, l) in parsed.iter().enumerate() {
            if let Some(l) = l {
                let row = &tl.data()[i * k..(i + 1) * k];
                let max = row.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
                let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
                total += (lse - row[*l]).f64();
                count += 1;
            }
        }
        let loss = if count == 0 {
            log::warn!("cross_entropy: every position carries the ignore label; loss defined as 0");
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(logits);
        let v = self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits,
                probs,
                labels: parsed,
                classes: k,
                count,
            },
            rg,
        );
        Ok(LossOutput {
            loss: v,
            counted: count,
        })
    }

    /// Bilinear resize of an `h×w×c` map with half-pixel sample centers.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        let (h, w, c) = tx.dims3()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(shape_err("bilinear_resize", tx.shape(), &[out_h, out_w, c]));
        }
        let data = kernels::bilinear_resize(tx.data(), h, w, c, out_h, out_w);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[out_h, out_w, c], data)?,
            Op::Bilinear {
                x,
                h,
                w,
                c,
                oh: out_h,
                ow: out_w,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar, keeping the tape so it can be replayed.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves.insert(i, g);
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        let mut params: Vec<(ParamId, usize)> =
            self.param_vars.iter().map(|(id, v)| (*id, v.0)).collect();
        params.sort();
        Ok(Gradients { leaves, params })
    }

    /// Reverse-mode pass from a scalar. Consumes the tape, so a second pass
    /// over the same recording cannot happen.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        self.gradients(loss)
    }

    fn propagate(&self, op: &Op<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        // Returns the gradient buffer of `v`, allocating it on first use.
        fn buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, n: usize) -> &'a mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        let val = |v: &Var| self.value(*v);
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().expect("recorded 2-D");
                let n = val(b).shape()[1];
                if rg(a) {
                    kernels::matmul_nt_acc(g, val(b).data(), buf(grads, *a, m * k), m, n, k);
                }
                if rg(b) {
                    kernels::matmul_tn_acc(val(a).data(), g, buf(grads, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(a).dims2().expect("recorded 2-D");
                let n = val(b).shape()[0];
                if rg(a) {
                    kernels::matmul_acc(g, val(b).data(), buf(grads, *a, m * k), m, n, k);
                }
                if rg(b) {
                    kernels::matmul_tn_acc(g, val(a).data(), buf(grads, *b, n * k), m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(a).dims2().expect("recorded 2-D");
                let gt = kernels::transpose(g, c, r);
                add_into(buf(grads, *a, r * c), &gt);
            }
            Op::Reshape(a) => add_into(buf(grads, *a, g.len()), g),
            Op::Add(a, b) => {
                if rg(a) {
                    add_into(buf(grads, *a, g.len()), g);
                }
                if rg(b) {
                    add_into(buf(grads, *b, g.len()), g);
                }
            }
            Op::AddScalar(a, b) => {
                if rg(a) {
                    add_into(buf(grads, *a, g.len()), g);
                }
                if rg(b) {
                    let n = val(b).numel();
                    buf(grads, *b, n)[0] += g.iter().copied().sum::<T>();
                }
            }
            Op::AddRow(a, row) => {
                if rg(a) {
                    add_into(buf(grads, *a, g.len()), g);
                }
                if rg(row) {
                    let n = val(row).numel();
                    let gr = buf(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let other = val(b).data();
                    let ga = buf(grads, *a, g.len());
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(other) {
                        *o += *gv * *bv;
                    }
                }
                if rg(b) {
                    let other = val(a).data();
                    let gb = buf(grads, *b, g.len());
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(other) {
                        *o += *gv * *av;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                let ga = buf(grads, *a, g.len());
                for ((o, gv), m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += *gv * *m;
                }
            }
            Op::Scale(a, s) => {
                let ga = buf(grads, *a, g.len());
                for (o, gv) in ga.iter_mut().zip(g) {
                    *o += *gv * *s;
                }
            }
            Op::Sum(a) => {
                let n = val(a).numel();
                for o in buf(grads, *a, n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = self.value(Var(out)).data();
                let gx = buf(grads, *x, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let d: T = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - d);
                        }
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
                let gv = val(gain).data();
                let n = gv.len();
                let rows = rstd.len();
                if rg(gain) {
                    let gg = buf(grads, *gain, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if rg(bias) {
                    let gb = buf(grads, *bias, n);
                    for r in 0..rows {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                }
                if rg(x) {
                    let inv_n = T::one() / T::of(n as f64);
                    let gx = buf(grads, *x, rows * n);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[r * n + j];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for j in 0..n {
                            gx[r * n + j] +=
                                rstd[r] * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = val(a).data();
                let ga = buf(grads, *a, g.len());
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(xs) {
                    *o += *gv * gelu_derivative(*x);
                }
            }
            Op::Concat {
                inputs,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (v, &len) in inputs.iter().zip(sizes) {
                    if rg(v) {
                        let gv = buf(grads, *v, outer * len * inner);
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut gv[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            } => {
                let gx = buf(grads, *x, outer * len_in * inner);
                for o in 0..*outer {
                    let dst = (o * len_in + start) * inner;
                    add_into(
                        &mut gx[dst..dst + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                norms,
                eps,
            } => {
                let y = self.value(Var(out)).data();
                let gx = buf(grads, *x, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let n = norms[o * inner + i];
                        // Below eps the norm is a constant, so only the 1/n scaling flows back.
                        let d: T = if n > *eps {
                            (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum()
                        } else {
                            T::zero()
                        };
                        for j in 0..*len {
                            gx[idx(j)] += (g[idx(j)] - y[idx(j)] * d) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                classes,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let k = *classes;
                let scale = g[0] / T::of(*count as f64);
                let gl = buf(grads, *logits, probs.len());
                for (i, l) in labels.iter().enumerate() {
                    if let Some(l) = l {
                        for j in 0..k {
                            gl[i * k + j] += scale * probs[i * k + j];
                        }
                        gl[i * k + l] -= scale;
                    }
                }
            }
            Op::Bilinear { x, h, w, c, oh, ow } => {
                let gx = buf(grads, *x, h * w * c);
                kernels::bilinear_resize_backward(g, *h, *w, *c, *oh, *ow, gx);
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_SCALE) * (x + T::of(GELU_COEF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_SCALE) * (x + T::of(GELU_COEF) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_SCALE) * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
