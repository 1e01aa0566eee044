use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{matmul_into, matmul_nt_into, matmul_tn_into, stable_sigmoid, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const BCE_EPS: f64 = 1e-7;
const MASK_NEG: f64 = -1e30;

enum Op<S> {
    Leaf,
    MatMul { a: ValueId, b: ValueId },
    /// a · bᵀ
    MatMulNT { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: S },
    AddBiasRows { x: ValueId, bias: ValueId },
    /// Adds a constant row vector to every row; no gradient flows to the mask.
    AddMaskRows { x: ValueId },
    SoftmaxRows { x: ValueId },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, eps: S },
    Sigmoid { x: ValueId },
    Tanh { x: ValueId },
    Gelu { x: ValueId },
    EmbeddingLookup { table: ValueId, ids: Vec<usize> },
    Dropout { x: ValueId, mask: Vec<S> },
    ConcatRows { parts: Vec<ValueId> },
    ConcatCols { parts: Vec<ValueId> },
    SliceCols { x: ValueId, start: usize, end: usize },
    Sum { x: ValueId },
    BceLoss { probs: ValueId, labels: Vec<S> },
    /// Mean cross-entropy over rows of logits; `probs` caches the row softmax.
    CrossEntropyRows { logits: ValueId, targets: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    tensor: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward pass as a topologically ordered list of operations.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].tensor
    }

    /// Gradient accumulated for `id`, if backward reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn leaf(&mut self, tensor: Tensor<S>) -> ValueId {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b },
            needs,
        ))
    }

    /// `a[m,k] · b[n,k]ᵀ -> [m,n]`
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNT { a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let c = S::from_f64(c);
        let data: Vec<S> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale { x, c }, needs))
    }

    /// Add a bias vector (length = last dim) to every row.
    pub fn add_bias_rows(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let d = self.value(x).last_dim();
        if self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bias_data = self.value(bias).data().to_vec();
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias_data[i % d])
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBiasRows { x, bias }, needs))
    }

    /// Additive key mask for attention: positions where `masked[j]` is true
    /// receive a large negative constant in every row.
    pub fn add_key_mask(&mut self, x: ValueId, masked: &[bool]) -> Result<ValueId> {
        let (rows, cols) = self.value(x).dims2()?;
        if masked.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_key_mask",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![masked.len()],
            });
        }
        let neg = S::from_f64(MASK_NEG);
        let mut data = self.value(x).data().to_vec();
        for i in 0..rows {
            for (j, &m) in masked.iter().enumerate() {
                if m {
                    data[i * cols + j] += neg;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::AddMaskRows { x },
            needs,
        ))
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.value(x).last_dim();
        let src = self.value(x).data();
        let mut data = vec![S::zero(); src.len()];
        for (row_out, row_in) in data.chunks_mut(n).zip(src.chunks(n)) {
            let mut max = row_in[0];
            for &v in row_in {
                max = max.maximum(v);
            }
            let mut sum = S::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for o in row_out.iter_mut() {
                *o *= inv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxRows { x }, needs))
    }

    /// Per-last-dim standardization followed by an affine transform.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let d = self.value(x).last_dim();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let eps = S::from_f64(eps);
        let inv_d = S::one() / S::from_f64(d as f64);
        let gain_data = self.value(gain).data().to_vec();
        let bias_data = self.value(bias).data().to_vec();
        let src = self.value(x).data();
        let mut data = vec![S::zero(); src.len()];
        for (row_out, row_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mut mean = S::zero();
            for &v in row_in {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::zero();
            for &v in row_in {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv_std = S::one() / (var + eps).sqrt();
            for (j, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                *o = gain_data[j] * ((v - mean) * inv_std) + bias_data[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        ))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sigmoid { x }, needs))
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        let data: Vec<S> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Tanh { x }, needs))
    }

    /// Gelu with the tanh approximation.
    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let c = S::from_f64(GELU_C);
        let a = S::from_f64(GELU_A);
        let half = S::from_f64(0.5);
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let u = c * (v + a * v * v * v);
                half * v * (S::one() + u.tanh())
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu { x }, needs))
    }

    /// Gather rows of `table` by index; also serves as token/position
    /// embedding lookup.
    pub fn embedding_lookup(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (rows, d) = self.value(table).dims2()?;
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    bound: rows,
                });
            }
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "embedding_lookup with empty id list".into(),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Inverted dropout: kept units are scaled by 1/(1-p). Identity (the
    /// same value id) when `training` is false or `p` is zero.
    pub fn dropout(
        &mut self,
        x: ValueId,
        p: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of no parts".into()));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of no parts".into()));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows, total_cols],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_cols += c;
        }
        let mut data = vec![S::zero(); rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.value(p).dims2()?;
            let src = self.value(p).data();
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, total_cols], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (rows, cols) = self.value(x).dims2()?;
        if start >= end || end > cols {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {end}) out of bounds for {cols} columns"
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + end]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, w], data)?,
            Op::SliceCols { x, start, end },
            needs,
        ))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let mut s = S::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, needs))
    }

    /// Mean binary cross-entropy between probabilities and {0,1} labels.
    /// Probabilities are clamped to [1e-7, 1-1e-7].
    pub fn bce_loss(&mut self, probs: ValueId, labels: &[f64]) -> Result<ValueId> {
        let n = self.value(probs).numel();
        if n == 0 || labels.is_empty() {
            return Err(Error::NoMaskedPositions);
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                lhs: self.value(probs).shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let eps = S::from_f64(BCE_EPS);
        let hi = S::one() - eps;
        let labels_s: Vec<S> = labels.iter().map(|&y| S::from_f64(y)).collect();
        let mut total = S::zero();
        for (&p, &y) in self.value(probs).data().iter().zip(&labels_s) {
            let p = p.maximum(eps).minimum(hi);
            total += y * p.ln() + (S::one() - y) * (S::one() - p).ln();
        }
        let loss = -total / S::from_f64(n as f64);
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLoss {
                probs,
                labels: labels_s,
            },
            needs,
        ))
    }

    /// Mean cross-entropy of logit rows against target class indices.
    pub fn cross_entropy_rows(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (rows, v) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: vec![rows, v],
                rhs: vec![targets.len()],
            });
        }
        if rows == 0 {
            return Err(Error::NoMaskedPositions);
        }
        for &t in targets {
            if t >= v {
                return Err(Error::IndexOutOfRange { index: t, bound: v });
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); src.len()];
        let mut total = S::zero();
        for (r, (row_out, row_in)) in probs.chunks_mut(v).zip(src.chunks(v)).enumerate() {
            let mut max = row_in[0];
            for &x in row_in {
                max = max.maximum(x);
            }
            let mut sum = S::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                let e = (x - max).exp();
                *o = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for o in row_out.iter_mut() {
                *o *= inv;
            }
            // log-softmax at the target, computed from the stabilized sum
            total += (row_in[targets[r]] - max) - sum.ln();
        }
        let loss = -total / S::from_f64(rows as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss with seed gradient 1.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        self.backward_seeded(loss, S::one())
    }

    /// Backpropagate with an explicit seed gradient on the loss. Gradients
    /// accumulate across calls; use [`Tape::reset_grads`] to clear them.
    pub fn backward_seeded(&mut self, loss: ValueId, seed: S) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "loss value {} is not on this tape",
                loss.0
            )));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }
        // Fresh buffers per pass so repeated calls add (not compound)
        // their contributions into the persistent gradients.
        let mut scratch: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![seed]);

        for i in (0..=loss.0).rev() {
            if scratch[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = scratch[i].take().expect("checked above");
            self.propagate(i, &g, &mut scratch)?;
            scratch[i] = Some(g);
        }

        for (slot, fresh) in self.grads.iter_mut().zip(scratch) {
            if let Some(fresh) = fresh {
                match slot {
                    Some(acc) => {
                        for (a, f) in acc.iter_mut().zip(fresh) {
                            *a += f;
                        }
                    }
                    None => *slot = Some(fresh),
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, node_idx: usize, g: &[S], scratch: &mut [Option<Vec<S>>]) -> Result<()> {
        fn slot<S: Scalar>(
            scratch: &mut [Option<Vec<S>>],
            idx: usize,
            numel: usize,
        ) -> &mut [S] {
            let s = &mut scratch[idx];
            if s.is_none() {
                *s = Some(vec![S::zero(); numel]);
            }
            s.as_mut().expect("just filled")
        }

        match &self.nodes[node_idx].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let da = slot(scratch, a.0, m * k);
                    matmul_nt_into(g, bd, da, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let db = slot(scratch, b.0, k * n);
                    matmul_tn_into(ad, g, db, m, k, n);
                }
            }

            Op::MatMulNT { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                if self.needs(*a) {
                    // dA = g · B
                    let bd = self.value(*b).data();
                    let da = slot(scratch, a.0, m * k);
                    matmul_into(g, bd, da, m, n, k);
                }
                if self.needs(*b) {
                    // dB = gᵀ · A
                    let ad = self.value(*a).data();
                    let db = slot(scratch, b.0, n * k);
                    matmul_tn_into(g, ad, db, m, n, k);
                }
            }

            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.needs(id) {
                        let d = slot(scratch, id.0, g.len());
                        for (o, &gv) in d.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }

            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let da = slot(scratch, a.0, g.len());
                    for ((o, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let db = slot(scratch, b.0, g.len());
                    for ((o, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }

            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let dx = slot(scratch, x.0, g.len());
                    for (o, &gv) in dx.iter_mut().zip(g) {
                        *o += gv * *c;
                    }
                }
            }

            Op::AddBiasRows { x, bias } => {
                let d = self.value(*bias).numel();
                if self.needs(*x) {
                    let dx = slot(scratch, x.0, g.len());
                    for (o, &gv) in dx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.needs(*bias) {
                    let db = slot(scratch, bias.0, d);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                }
            }

            Op::AddMaskRows { x } => {
                if self.needs(*x) {
                    let dx = slot(scratch, x.0, g.len());
                    for (o, &gv) in dx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }

            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let n = self.nodes[node_idx].tensor.last_dim();
                    let y = self.nodes[node_idx].tensor.data();
                    let dx = slot(scratch, x.0, y.len());
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let mut dot = S::zero();
                        for (&yv, &gv) in ys.iter().zip(gs) {
                            dot += yv * gv;
                        }
                        let dxs = &mut dx[r * n..(r + 1) * n];
                        for ((o, &yv), &gv) in dxs.iter_mut().zip(ys).zip(gs) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let d = self.value(*gain).numel();
                let inv_d = S::one() / S::from_f64(d as f64);
                let xd = self.value(*x).data();
                let gaind = self.value(*gain).data();

                // Recompute per-row normalization stats.
                let rows = xd.len() / d;
                let mut xhat = vec![S::zero(); xd.len()];
                let mut inv_std = vec![S::zero(); rows];
                for r in 0..rows {
                    let xs = &xd[r * d..(r + 1) * d];
                    let mut mean = S::zero();
                    for &v in xs {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = S::zero();
                    for &v in xs {
                        let c = v - mean;
                        var += c * c;
                    }
                    var *= inv_d;
                    inv_std[r] = S::one() / (var + *eps).sqrt();
                    for (j, &v) in xs.iter().enumerate() {
                        xhat[r * d + j] = (v - mean) * inv_std[r];
                    }
                }

                if self.needs(*gain) {
                    let dgain = slot(scratch, gain.0, d);
                    for (i, &gv) in g.iter().enumerate() {
                        dgain[i % d] += gv * xhat[i];
                    }
                }
                if self.needs(*bias) {
                    let dbias = slot(scratch, bias.0, d);
                    for (i, &gv) in g.iter().enumerate() {
                        dbias[i % d] += gv;
                    }
                }
                if self.needs(*x) {
                    let dx = slot(scratch, x.0, xd.len());
                    for r in 0..rows {
                        let gs = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = S::zero();
                        let mut mean_ghx = S::zero();
                        for j in 0..d {
                            let gh = gs[j] * gaind[j];
                            mean_gh += gh;
                            mean_ghx += gh * xh[j];
                        }
                        mean_gh *= inv_d;
                        mean_ghx *= inv_d;
                        let dxs = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let gh = gs[j] * gaind[j];
                            dxs[j] += (gh - mean_gh - xh[j] * mean_ghx) * inv_std[r];
                        }
                    }
                }
            }

            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let y = self.nodes[node_idx].tensor.data();
                    let dx = slot(scratch, x.0, y.len());
                    for ((o, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (S::one() - yv);
                    }
                }
            }

            Op::Tanh { x } => {
                if self.needs(*x) {
                    let y = self.nodes[node_idx].tensor.data();
                    let dx = slot(scratch, x.0, y.len());
                    for ((o, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *o += gv * (S::one() - yv * yv);
                    }
                }
            }

            Op::Gelu { x } => {
                if self.needs(*x) {
                    let c = S::from_f64(GELU_C);
                    let a = S::from_f64(GELU_A);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let xd = self.value(*x).data();
                    let dx = slot(scratch, x.0, xd.len());
                    for ((o, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        let u = c * (xv + a * xv * xv * xv);
                        let t = u.tanh();
                        let du = c * (S::one() + three * a * xv * xv);
                        let d = half * (S::one() + t) + half * xv * (S::one() - t * t) * du;
                        *o += gv * d;
                    }
                }
            }

            Op::EmbeddingLookup { table, ids } => {
                if self.needs(*table) {
                    let (rows, d) = self.value(*table).dims2()?;
                    let dt = slot(scratch, table.0, rows * d);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }

            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let dx = slot(scratch, x.0, g.len());
                    for ((o, &gv), &mv) in dx.iter_mut().zip(g).zip(mask) {
                        *o += gv * mv;
                    }
                }
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        let dp = slot(scratch, p.0, n);
                        for (o, &gv) in dp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gv;
                        }
                    }
                    offset += n;
                }
            }

            Op::ConcatCols { parts } => {
                let (rows, total_cols) = self.nodes[node_idx].tensor.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.value(p).dims2()?;
                    if self.needs(p) {
                        let dp = slot(scratch, p.0, rows * c);
                        for i in 0..rows {
                            for j in 0..c {
                                dp[i * c + j] += g[i * total_cols + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }

            Op::SliceCols { x, start, end } => {
                if self.needs(*x) {
                    let (rows, cols) = self.value(*x).dims2()?;
                    let w = end - start;
                    let dx = slot(scratch, x.0, rows * cols);
                    for i in 0..rows {
                        for j in 0..w {
                            dx[i * cols + start + j] += g[i * w + j];
                        }
                    }
                }
            }

            Op::Sum { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let gv = g[0];
                    let dx = slot(scratch, x.0, n);
                    for o in dx.iter_mut() {
                        *o += gv;
                    }
                }
            }

            Op::BceLoss { probs, labels } => {
                if self.needs(*probs) {
                    let eps = S::from_f64(BCE_EPS);
                    let hi = S::one() - eps;
                    let inv_n = S::one() / S::from_f64(labels.len() as f64);
                    let pd = self.value(*probs).data();
                    let gv = g[0];
                    let dp = slot(scratch, probs.0, pd.len());
                    for ((o, &p), &y) in dp.iter_mut().zip(pd).zip(labels) {
                        // zero gradient where the clamp is active
                        if p > eps && p < hi {
                            *o += gv * (p - y) / (p * (S::one() - p)) * inv_n;
                        }
                    }
                }
            }

            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let v = self.value(*logits).last_dim();
                    let numel = self.value(*logits).numel();
                    let inv_n = S::one() / S::from_f64(targets.len() as f64);
                    let gv = g[0];
                    let dl = slot(scratch, logits.0, numel);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let indicator = if j == t { S::one() } else { S::zero() };
                            dl[r * v + j] += gv * (probs[r * v + j] - indicator) * inv_n;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
