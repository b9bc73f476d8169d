//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass in topological order
//! (define-by-run; the tape is rebuilt per forward pass). [`Tape::backward`]
//! replays the records once, in reverse, accumulating gradients into every
//! node; multiple uses of a node sum their incoming gradients.
//!
//! A tape and its tensors form a single-owner unit: one forward+backward runs
//! on one thread of control. Distinct tapes may run concurrently with no
//! shared state; gradient maps are merged by summation after the fact.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{Param, Tensor};

/// Parameter-name to tape-node map collected while binding a model onto a
/// tape; the training loop uses it to look up parameter gradients.
pub type Bindings = BTreeMap<String, Var>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sparse row-combination weights: `out[r] = sum over (src, w) of w * in[src]`.
pub type RowMixWeights<S> = Vec<Vec<(usize, S)>>;

enum Op<S: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    MeanAxis { a: Var, axis: usize },
    SumAll { a: Var },
    Sigmoid { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    RowMix { a: Var, weights: RowMixWeights<S> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    BceLogits { logits: Var, targets: Tensor<S> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`.
    ///
    /// `Some` for every requires-grad leaf (zeros when the loss does not
    /// reach it); `None` for constants the loss does not reach.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable leaf (an input or fixed tensor).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter as a differentiable leaf and records the
    /// name-to-node binding.
    pub fn bind(&mut self, param: &Param<S>, reg: &mut Bindings) -> Var {
        let v = self.leaf(param.value.clone());
        reg.insert(param.name.clone(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.push(value, op, false)
    }

    // ── elementwise and shape ops ───────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.out(value, Op::Add { a, b }))
    }

    /// Broadcast-adds a rank-1 `row` along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let d = *ta.shape().last().unwrap_or(&0);
        if tr.shape() != [d] {
            return Err(Error::dim(format!(
                "add_row: {:?} vs row {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.out(value, Op::AddRow { a, row }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.out(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.out(value, Op::Scale { a, factor })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::dim(format!("transpose: rank-2 only, got {:?}", ta.shape())));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.at2(i, j);
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.out(value, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                ta.shape(),
                ta.numel(),
                shape,
                numel
            )));
        }
        let value = Tensor::new(shape, ta.data().to_vec())?;
        Ok(self.out(value, Op::Reshape { a }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::contract("concat: no inputs"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!(
                "concat: axis {} out of range for {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!("concat: {:?} vs {:?}", s, first)));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = vec![S::zero(); shape.iter().product()];
        let out_stride = axis_total * inner;
        for o in 0..outer {
            let mut written = 0;
            for &v in inputs {
                let t = self.value(v);
                let k = t.shape()[axis];
                let chunk = k * inner;
                let src = &t.data()[o * chunk..(o + 1) * chunk];
                let dst_base = o * out_stride + written * inner;
                data[dst_base..dst_base + chunk].copy_from_slice(src);
                written += k;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.out(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice: [{start}, {start}+{len}) along axis {axis} of {shape:?}"
            )));
        }
        let (outer, axis_len, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = o * axis_len * inner + start * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&ta.data()[src_base..src_base + len * inner]);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.out(value, Op::Slice { a, axis, start }))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim(format!(
                "mean_axis: axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, axis_len, inner) = axis_split(shape, axis);
        let inv = S::one() / cast::<S>(axis_len as f64);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..axis_len {
                let base = o * axis_len * inner + j * inner;
                for i in 0..inner {
                    data[o * inner + i] += ta.data()[base + i];
                }
            }
        }
        for x in &mut data {
            *x *= inv;
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.out(value, Op::MeanAxis { a, axis }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = S::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        self.out(Tensor::scalar(s), Op::SumAll { a })
    }

    // ── nonlinear ops ───────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid_stable(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.out(value, Op::Sigmoid { a })
    }

    /// Exact error-function GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * normal_cdf(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.out(value, Op::Gelu { a })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, axis_len, inner) = axis_split(shape, axis);
        let mut data = ta.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * axis_len * inner + j * inner + i;
                let mut m = data[idx(0)];
                for j in 1..axis_len {
                    if data[idx(j)] > m {
                        m = data[idx(j)];
                    }
                }
                let mut sum = S::zero();
                for j in 0..axis_len {
                    let e = (data[idx(j)] - m).exp();
                    data[idx(j)] = e;
                    sum += e;
                }
                for j in 0..axis_len {
                    data[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.out(value, Op::Softmax { a, axis }))
    }

    /// Per-last-axis normalization with affine `gamma`/`beta`; biased variance.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::dim("layernorm: empty last dimension".to_string()));
        }
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim(format!(
                "layernorm: input {:?} with gamma {:?}, beta {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        let inv_d = S::one() / cast::<S>(d as f64);
        for row in data.chunks_mut(d) {
            let mut mean = S::zero();
            for &v in row.iter() {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::zero();
            for &v in row.iter() {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let sinv = S::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * sinv * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.out(value, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Applies fixed sparse row weights: `out[r] = sum of w * a[src]`.
    ///
    /// `a` must be rank 2; each output row lists its `(source row, weight)`
    /// contributions. Used for positional-embedding resampling.
    pub fn row_mix(&mut self, a: Var, weights: RowMixWeights<S>) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::dim(format!("row_mix: rank-2 only, got {:?}", ta.shape())));
        }
        let (rows_in, d) = (ta.rows(), ta.cols());
        let mut data = vec![S::zero(); weights.len() * d];
        for (r, srcs) in weights.iter().enumerate() {
            for &(src, w) in srcs {
                if src >= rows_in {
                    return Err(Error::dim(format!(
                        "row_mix: source row {src} out of {rows_in}"
                    )));
                }
                let src_row = &ta.data()[src * d..(src + 1) * d];
                let dst_row = &mut data[r * d..(r + 1) * d];
                for (o, &v) in dst_row.iter_mut().zip(src_row) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new(vec![weights.len(), d], data)?;
        Ok(self.out(value, Op::RowMix { a, weights }))
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean negative log-softmax of the labelled classes; rank-0 output.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 {
            return Err(Error::dim(format!(
                "cross_entropy: logits must be rank 2, got {:?}",
                tl.shape()
            )));
        }
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut total = S::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &tl.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(row[0], S::max);
            let mut sum = S::zero();
            for &v in row {
                sum += (v - m).exp();
            }
            total += m + sum.ln() - row[label];
        }
        let value = Tensor::scalar(total / cast::<S>(b as f64));
        Ok(self.out(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean numerically-stabilized sigmoid binary cross-entropy; rank-0 output.
    pub fn bce_logits(&mut self, logits: Var, targets: &Tensor<S>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "bce_logits: logits {:?} vs targets {:?}",
                tl.shape(),
                targets.shape()
            )));
        }
        if targets
            .data()
            .iter()
            .any(|&t| t != S::zero() && t != S::one())
        {
            return Err(Error::contract("bce_logits: targets must be 0 or 1"));
        }
        let n = tl.numel();
        let mut total = S::zero();
        for (&z, &t) in tl.data().iter().zip(targets.data()) {
            // max(z,0) - z*t + ln(1 + exp(-|z|))
            total += z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / cast::<S>(n as f64));
        Ok(self.out(
            value,
            Op::BceLogits {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::dim(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![S::zero(); m * n];
        matmul_into(ta.data(), tb.data(), m, k, n, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.out(value, Op::Matmul { a, b }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss.
    ///
    /// Returns gradients for every node the loss reaches; requires-grad
    /// leaves it does not reach get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            loss_node.value.shape().to_vec(),
            vec![S::one()],
        )?);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
                accumulate(grads, *b, self.shape(*b), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
                let d = self.shape(*row)[0];
                accumulate(grads, *row, self.shape(*row), |dst| {
                    for chunk in g.data().chunks(d) {
                        for (dv, &gv) in dst.iter_mut().zip(chunk) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for ((d, &gv), &bv) in dst.iter_mut().zip(g.data()).zip(vb) {
                        *d += gv * bv;
                    }
                });
                accumulate(grads, *b, self.shape(*b), |dst| {
                    for ((d, &gv), &av) in dst.iter_mut().zip(g.data()).zip(va) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d += gv * f;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = g . B^T
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for i in 0..m {
                        let grow = &g.data()[i * n..(i + 1) * n];
                        let drow = &mut dst[i * k..(i + 1) * k];
                        for (p, dv) in drow.iter_mut().enumerate() {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            let mut acc = S::zero();
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            *dv += acc;
                        }
                    }
                });
                // dB = A^T . g
                accumulate(grads, *b, self.shape(*b), |dst| {
                    for i in 0..m {
                        let arow = &ta.data()[i * k..(i + 1) * k];
                        let grow = &g.data()[i * n..(i + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            let drow = &mut dst[p * n..(p + 1) * n];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (n, m) = (node.value.rows(), node.value.cols());
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for i in 0..n {
                        for j in 0..m {
                            dst[j * n + i] += g.data()[i * m + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, axis_total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let k = self.shape(v)[*axis];
                    let chunk = k * inner;
                    let off = offset;
                    accumulate(grads, v, self.shape(v), |dst| {
                        for o in 0..outer {
                            let src_base = o * axis_total * inner + off * inner;
                            let dst_base = o * chunk;
                            for i in 0..chunk {
                                dst[dst_base + i] += g.data()[src_base + i];
                            }
                        }
                    });
                    offset += k;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a);
                let (outer, axis_len, inner) = axis_split(in_shape, *axis);
                let len = node.value.shape()[*axis];
                accumulate(grads, *a, in_shape, |dst| {
                    for o in 0..outer {
                        let dst_base = o * axis_len * inner + start * inner;
                        let src_base = o * len * inner;
                        for i in 0..len * inner {
                            dst[dst_base + i] += g.data()[src_base + i];
                        }
                    }
                });
            }
            Op::MeanAxis { a, axis } => {
                let in_shape = self.shape(*a);
                let (outer, axis_len, inner) = axis_split(in_shape, *axis);
                let inv = S::one() / cast::<S>(axis_len as f64);
                accumulate(grads, *a, in_shape, |dst| {
                    for o in 0..outer {
                        for j in 0..axis_len {
                            let base = o * axis_len * inner + j * inner;
                            for i in 0..inner {
                                dst[base + i] += g.data()[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g.data()[0];
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g.data()).zip(y) {
                        *d += gv * yv * (S::one() - yv);
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g.data()).zip(x) {
                        *d += gv * (normal_cdf(xv) + xv * normal_pdf(xv));
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let shape = node.value.shape();
                let (outer, axis_len, inner) = axis_split(shape, *axis);
                let y = node.value.data();
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * axis_len * inner + j * inner + i;
                            let mut dot = S::zero();
                            for j in 0..axis_len {
                                dot += g.data()[idx(j)] * y[idx(j)];
                            }
                            for j in 0..axis_len {
                                dst[idx(j)] += y[idx(j)] * (g.data()[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let d = *tx.shape().last().unwrap();
                let rows = tx.numel() / d;
                let inv_d = S::one() / cast::<S>(d as f64);
                // Recompute per-row statistics from the stored input.
                let mut xhat = vec![S::zero(); tx.numel()];
                let mut sinvs = vec![S::zero(); rows];
                for r in 0..rows {
                    let row = &tx.data()[r * d..(r + 1) * d];
                    let mut mean = S::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = S::zero();
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var *= inv_d;
                    let sinv = S::one() / (var + *eps).sqrt();
                    sinvs[r] = sinv;
                    for (j, &v) in row.iter().enumerate() {
                        xhat[r * d + j] = (v - mean) * sinv;
                    }
                }
                accumulate(grads, *gamma, self.shape(*gamma), |dst| {
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                accumulate(grads, *beta, self.shape(*beta), |dst| {
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g.data()[r * d + j];
                        }
                    }
                });
                accumulate(grads, *x, self.shape(*x), |dst| {
                    for r in 0..rows {
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..d {
                            let dxhat = g.data()[r * d + j] * tg.data()[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat[r * d + j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for j in 0..d {
                            let dxhat = g.data()[r * d + j] * tg.data()[j];
                            dst[r * d + j] += sinvs[r]
                                * (dxhat - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::RowMix { a, weights } => {
                let d = self.shape(*a)[1];
                accumulate(grads, *a, self.shape(*a), |dst| {
                    for (r, srcs) in weights.iter().enumerate() {
                        let grow = &g.data()[r * d..(r + 1) * d];
                        for &(src, w) in srcs {
                            let drow = &mut dst[src * d..(src + 1) * d];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += w * gv;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let (b, c) = (tl.rows(), tl.cols());
                let gv = g.data()[0] / cast::<S>(b as f64);
                accumulate(grads, *logits, self.shape(*logits), |dst| {
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &tl.data()[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(row[0], S::max);
                        let mut sum = S::zero();
                        for &v in row {
                            sum += (v - m).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - m).exp() / sum;
                            let indicator = if j == label { S::one() } else { S::zero() };
                            dst[i * c + j] += gv * (p - indicator);
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let tl = self.value(*logits);
                let gv = g.data()[0] / cast::<S>(tl.numel() as f64);
                accumulate(grads, *logits, self.shape(*logits), |dst| {
                    for ((d, &z), &t) in dst.iter_mut().zip(tl.data()).zip(targets.data()) {
                        *d += gv * (sigmoid_stable(z) - t);
                    }
                });
            }
        }
    }
}

/// (elements before, length of, elements after) the given axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    v: Var,
    shape: &[usize],
    write: impl FnOnce(&mut [S]),
) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec()));
    }
    write(slot.as_mut().unwrap().data_mut());
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn normal_cdf<S: Scalar>(x: S) -> S {
    let half = cast::<S>(0.5);
    half * (S::one() + (x / cast::<S>(std::f64::consts::SQRT_2)).erf())
}

fn normal_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = cast::<S>(0.3989422804014327);
    inv_sqrt_2pi * (-(x * x) * cast::<S>(0.5)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let mut tape = Tape::new();
        let p = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let m = tape.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
        let y = tape.gelu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-9);
        // x * Phi(x) at x = 1, from independent high-precision evaluation.
        assert!((v[2] - 0.8413447460685430).abs() < 1e-15);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 3, &[5.0, 5.0, 5.0]));
        let g = tape.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.layernorm(x, g, b, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_hand_computed() {
        // mean 2, biased std sqrt(2/3)
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 3, &[1.0, 2.0, 3.0]));
        let g = tape.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.layernorm(x, g, b, 1e-15).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.224744871391589).abs() < 1e-7);
        assert!(v[1].abs() < 1e-12);
        assert!((v[2] - 1.224744871391589).abs() < 1e-7);
    }

    #[test]
    fn layernorm_zero_gamma_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[1.0, -4.0, 2.5, 0.0, 9.0, 3.0]));
        let g = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let b = tape.constant(Tensor::new(vec![3], vec![7.0, -1.0, 0.5]).unwrap());
        let y = tape.layernorm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, -1.0, 0.5, 7.0, -1.0, 0.5]);
    }

    #[test]
    fn layernorm_rejects_empty_dim() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 0]));
        let g = tape.constant(Tensor::zeros(vec![0]));
        let b = tape.constant(Tensor::zeros(vec![0]));
        assert!(matches!(
            tape.layernorm(x, g, b, 1e-6),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 2, &[0.0, 0.0, 1000.0, 1000.0]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        // direct high-precision evaluation of exp(x)/sum(exp)
        assert!((v[0] - 0.09003057317038046).abs() < 1e-15);
        assert!((v[1] - 0.24472847105479764).abs() < 1e-15);
        assert!((v[2] - 0.6652409557748219).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(1, 2, &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        let back = tape.slice(c, 0, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
        let tail = tape.slice(c, 0, 2, 1).unwrap();
        assert_eq!(tape.value(tail).data(), tape.value(b).data());
    }

    #[test]
    fn concat_slice_along_columns() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 1, &[1.0, 3.0]));
        let b = tape.constant(t2(2, 2, &[2.0, 9.0, 4.0, 8.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let mid = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(mid).data(), &[2.0, 9.0, 4.0, 8.0]);
    }

    #[test]
    fn add_row_broadcasts() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let r = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.add_row(a, r).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mean_axis_removes_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]));
        let m0 = tape.mean_axis(a, 0).unwrap();
        assert_eq!(tape.shape(m0), &[3]);
        assert_eq!(tape.value(m0).data(), &[3.0, 4.0, 5.0]);
        let m1 = tape.mean_axis(a, 1).unwrap();
        assert_eq!(tape.shape(m1), &[2]);
        assert_eq!(tape.value(m1).data(), &[2.0, 6.0]);
    }

    #[test]
    fn transpose_and_reshape() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = tape.transpose(a).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let r = tape.reshape(a, vec![6]).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(tape.reshape(a, vec![4]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 4]));
        let loss = tape.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturates_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(t2(1, 3, &[1000.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bce_fixed_points() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let targets = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let loss = tape.bce_logits(logits, &targets).unwrap();
        assert!((tape.value(loss).data()[0] - 2.0f64.ln()).abs() < 1e-15);

        let big = tape.constant(Tensor::new(vec![1, 1], vec![40.0]).unwrap());
        let loss = tape.bce_logits(big, &targets).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 2]));
        let targets = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            tape.bce_logits(logits, &targets),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // loss = sum(x + x) => grad = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 5.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn row_mix_combines_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape
            .row_mix(a, vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 2.0)]])
            .unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 6.0, 8.0]);
    }
}
