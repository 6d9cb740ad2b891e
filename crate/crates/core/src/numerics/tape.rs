//! Trace-based reverse-mode differentiation over a fixed op vocabulary.
//!
//! A [`Tape`] records every forward op together with the produced value.
//! [`Tape::backward`] walks the trace in reverse and accumulates gradients
//! for every node that (transitively) depends on a `param` leaf. `input`
//! leaves and everything reachable only from them never receive gradients,
//! which is how frozen encoders are kept out of the optimizer.
//!
//! Forward values are computed by the same kernels as the plain inference
//! path, so a taped forward is bit-identical to an untaped one.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::numerics::kernels::{self, Activation};
use crate::numerics::params::{GradSet, ParamSet};
use crate::numerics::tensor::{canonical_sum, Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Guard for the L1 weight normalization denominator. Unreachable when raw
/// weights come out of a softplus, but division by zero is fenced anyway.
pub const L1_NORM_GUARD: f64 = 1e-12;

enum Op {
    Leaf,
    Affine { x: ValueId, w: ValueId, b: ValueId },
    Conv2d { x: ValueId, k: ValueId, b: ValueId, stride: usize, pad: usize },
    Act { x: ValueId, act: Activation },
    Concat { parts: Vec<ValueId> },
    Reshape { x: ValueId },
    Upsample2x { x: ValueId },
    MatmulNT { a: ValueId, b: ValueId },
    WeightedSum { w: ValueId, parts: Vec<ValueId> },
    L1NormalizeRows { x: ValueId },
    L2NormalizeRows { x: ValueId },
    SoftmaxRows { x: ValueId },
    LogSoftmaxRows { x: ValueId },
    ScaledDot { q: ValueId, keys: Vec<ValueId>, scale: f64 },
    GatherCols { x: ValueId, idx: Vec<usize> },
    CrossEntropyRows { logits: ValueId, targets: Vec<usize> },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    MinElem { a: ValueId, b: ValueId },
    Clamp { x: ValueId, lo: f64, hi: f64 },
    Exp { x: ValueId },
    Square { x: ValueId },
    Scale { x: ValueId, c: f64 },
    SumRows { x: ValueId },
    SumAll { x: ValueId },
    MeanAll { x: ValueId },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by tape value id.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Recorded forward trace.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
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

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> ValueId {
        debug_assert!(value.all_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; participates in backward.
    pub fn param(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// y = x · Wᵀ + b (no activation; compose with [`Tape::act`]).
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let v = kernels::affine(
            self.value(x),
            self.value(w),
            self.value(b),
            Activation::Identity,
        )?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(v, Op::Affine { x, w, b }, ng))
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        k: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let v = kernels::conv2d(
            self.value(x),
            self.value(k),
            self.value(b),
            stride,
            pad,
            Activation::Identity,
        )?;
        let ng = self.needs(&[x, k, b]);
        Ok(self.push(v, Op::Conv2d { x, k, b, stride, pad }, ng))
    }

    pub fn act(&mut self, x: ValueId, act: Activation) -> ValueId {
        if act == Activation::Identity {
            return x;
        }
        let v = self.value(x).map(|e| act.apply(e));
        let ng = self.needs(&[x]);
        self.push(v, Op::Act { x, act }, ng)
    }

    /// Concatenate along axis 1 (feature or channel axis).
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(CoreError::Dimension("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(CoreError::Dimension("concat needs rank >= 2".into()));
        }
        let batch = first[0];
        let tail: usize = first[2..].iter().product();
        let mut axis1_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != batch || s.len() != first.len() || s[2..] != first[2..] {
                return Err(CoreError::Dimension(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    s, first
                )));
            }
            axis1_total += s[1];
        }
        let mut shape = first.clone();
        shape[1] = axis1_total;
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            let row_len = axis1_total * tail;
            for bi in 0..batch {
                let mut off = 0usize;
                for &p in parts {
                    let t = self.value(p);
                    let c = t.shape()[1] * tail;
                    od[bi * row_len + off..bi * row_len + off + c]
                        .copy_from_slice(&t.data()[bi * c..(bi + 1) * c]);
                    off += c;
                }
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(v, Op::Reshape { x }, ng))
    }

    pub fn upsample2x(&mut self, x: ValueId) -> Result<ValueId> {
        let v = kernels::upsample2x(self.value(x))?;
        let ng = self.needs(&[x]);
        Ok(self.push(v, Op::Upsample2x { x }, ng))
    }

    /// y = a · bᵀ for a [m,k], b [n,k].
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let bt = kernels::transpose2d(self.value(b))?;
        let v = kernels::matmul(self.value(a), &bt)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatmulNT { a, b }, ng))
    }

    /// R[b,:] = Σ_i w[b,i] · parts_i[b,:], summed in a canonical value order
    /// so the result is independent of part ordering.
    pub fn weighted_sum(&mut self, w: ValueId, parts: &[ValueId]) -> Result<ValueId> {
        let k = parts.len();
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 2 || wshape[1] != k {
            return Err(CoreError::Dimension(format!(
                "weighted_sum weights {:?} for {} parts",
                wshape, k
            )));
        }
        let batch = wshape[0];
        let pshape = self.value(parts[0]).shape().to_vec();
        if pshape.len() != 2 || pshape[0] != batch {
            return Err(CoreError::Dimension("weighted_sum part shape".into()));
        }
        let d = pshape[1];
        for &p in parts {
            if self.value(p).shape() != pshape.as_slice() {
                return Err(CoreError::Dimension("weighted_sum parts differ".into()));
            }
        }
        let mut out = Tensor::zeros(&[batch, d]);
        let mut terms = vec![S::ZERO; k];
        {
            let od = out.data_mut();
            for bi in 0..batch {
                for j in 0..d {
                    for (i, &p) in parts.iter().enumerate() {
                        let wv = self.nodes[w.0].value.data()[bi * k + i];
                        terms[i] = wv.mul(self.nodes[p.0].value.data()[bi * d + j]);
                    }
                    od[bi * d + j] = canonical_sum(&mut terms);
                }
            }
        }
        let mut ids = vec![w];
        ids.extend_from_slice(parts);
        let ng = self.needs(&ids);
        Ok(self.push(
            out,
            Op::WeightedSum {
                w,
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise x / max(Σ x, guard). Canonical-order sum.
    pub fn l1_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let (batch, k) = rank2(t)?;
        let mut out = Tensor::zeros(&[batch, k]);
        let mut scratch = vec![S::ZERO; k];
        {
            let od = out.data_mut();
            let xd = t.data();
            for bi in 0..batch {
                let row = &xd[bi * k..(bi + 1) * k];
                scratch.copy_from_slice(row);
                let denom = canonical_sum(&mut scratch).max(S::from_f64(L1_NORM_GUARD));
                for (o, &v) in od[bi * k..(bi + 1) * k].iter_mut().zip(row.iter()) {
                    *o = v.div(denom);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::L1NormalizeRows { x }, ng))
    }

    /// Row-wise x / max(‖x‖₂, guard).
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let (batch, k) = rank2(t)?;
        let mut out = Tensor::zeros(&[batch, k]);
        {
            let od = out.data_mut();
            let xd = t.data();
            for bi in 0..batch {
                let row = &xd[bi * k..(bi + 1) * k];
                let norm = l2_norm(row).max(S::from_f64(L1_NORM_GUARD));
                for (o, &v) in od[bi * k..(bi + 1) * k].iter_mut().zip(row.iter()) {
                    *o = v.div(norm);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x }, ng))
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let v = softmax_rows_value(self.value(x))?;
        let ng = self.needs(&[x]);
        Ok(self.push(v, Op::SoftmaxRows { x }, ng))
    }

    pub fn log_softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let (batch, k) = rank2(t)?;
        let mut out = Tensor::zeros(&[batch, k]);
        let mut scratch = vec![S::ZERO; k];
        {
            let od = out.data_mut();
            let xd = t.data();
            for bi in 0..batch {
                let row = &xd[bi * k..(bi + 1) * k];
                let m = row_max(row);
                for (s, &v) in scratch.iter_mut().zip(row.iter()) {
                    *s = v.sub(m).exp();
                }
                let lse = canonical_sum(&mut scratch).to_f64().ln();
                let lse = S::from_f64(lse);
                for (o, &v) in od[bi * k..(bi + 1) * k].iter_mut().zip(row.iter()) {
                    *o = v.sub(m).sub(lse);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::LogSoftmaxRows { x }, ng))
    }

    /// logits[b,i] = scale · ⟨q[b,:], keys_i[b,:]⟩.
    pub fn scaled_dot(&mut self, q: ValueId, keys: &[ValueId], scale: f64) -> Result<ValueId> {
        let (batch, d) = rank2(self.value(q))?;
        let k = keys.len();
        for &p in keys {
            if self.value(p).shape() != [batch, d] {
                return Err(CoreError::Dimension("scaled_dot key shape".into()));
            }
        }
        let sc = S::from_f64(scale);
        let mut out = Tensor::zeros(&[batch, k]);
        {
            let od = out.data_mut();
            for bi in 0..batch {
                for (i, &p) in keys.iter().enumerate() {
                    let qrow = &self.nodes[q.0].value.data()[bi * d..(bi + 1) * d];
                    let krow = &self.nodes[p.0].value.data()[bi * d..(bi + 1) * d];
                    let mut acc = S::ZERO;
                    for (&a, &b) in qrow.iter().zip(krow.iter()) {
                        acc = acc.add(a.mul(b));
                    }
                    od[bi * k + i] = acc.mul(sc);
                }
            }
        }
        let mut ids = vec![q];
        ids.extend_from_slice(keys);
        let ng = self.needs(&ids);
        Ok(self.push(
            out,
            Op::ScaledDot {
                q,
                keys: keys.to_vec(),
                scale,
            },
            ng,
        ))
    }

    /// y[b] = x[b, idx[b]].
    pub fn gather_cols(&mut self, x: ValueId, idx: &[usize]) -> Result<ValueId> {
        let t = self.value(x);
        let (batch, k) = rank2(t)?;
        if idx.len() != batch {
            return Err(CoreError::Dimension("gather_cols index length".into()));
        }
        let mut data = Vec::with_capacity(batch);
        for (bi, &ix) in idx.iter().enumerate() {
            if ix >= k {
                return Err(CoreError::Dimension(format!(
                    "gather_cols index {ix} out of {k}"
                )));
            }
            data.push(t.data()[bi * k + ix]);
        }
        let v = Tensor::from_vec(&[batch], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            v,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of −log softmax(logits)[b, target_b].
    pub fn cross_entropy_rows(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let lsm = self.log_softmax_rows(logits)?;
        let picked = self.gather_cols(lsm, targets)?;
        // mean of negated picks, fused into one scalar here for convenience
        let t = self.value(picked);
        let n = t.len();
        let mut acc = S::ZERO;
        for &v in t.data() {
            acc = acc.add(v);
        }
        let v = Tensor::scalar(acc.neg().div(S::from_f64(n as f64)));
        let ng = self.needs(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x.add(y))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x.sub(y))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x.mul(y))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    /// Elementwise minimum; ties propagate the gradient to the first operand.
    pub fn min_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x.min(y))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(v, Op::MinElem { a, b }, ng))
    }

    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> ValueId {
        let l = S::from_f64(lo);
        let h = S::from_f64(hi);
        let v = self.value(x).map(|e| e.max(l).min(h));
        let ng = self.needs(&[x]);
        self.push(v, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|e| e.exp());
        let ng = self.needs(&[x]);
        self.push(v, Op::Exp { x }, ng)
    }

    pub fn square(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|e| e.mul(e));
        let ng = self.needs(&[x]);
        self.push(v, Op::Square { x }, ng)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let cc = S::from_f64(c);
        let v = self.value(x).map(|e| e.mul(cc));
        let ng = self.needs(&[x]);
        self.push(v, Op::Scale { x, c }, ng)
    }

    /// [B,K] → [B], row sums.
    pub fn sum_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let (batch, k) = rank2(t)?;
        let mut data = Vec::with_capacity(batch);
        for bi in 0..batch {
            let mut acc = S::ZERO;
            for &v in &t.data()[bi * k..(bi + 1) * k] {
                acc = acc.add(v);
            }
            data.push(acc);
        }
        let v = Tensor::from_vec(&[batch], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(v, Op::SumRows { x }, ng))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let mut acc = S::ZERO;
        for &v in t.data() {
            acc = acc.add(v);
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, ng)
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let n = t.len();
        let mut acc = S::ZERO;
        for &v in t.data() {
            acc = acc.add(v);
        }
        let ng = self.needs(&[x]);
        self.push(
            Tensor::scalar(acc.div(S::from_f64(n as f64))),
            Op::MeanAll { x },
            ng,
        )
    }

    /// Gradients of a scalar loss with respect to every grad-tracked node.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(CoreError::State(
                "backward requested for a value not on this tape".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CoreError::Dimension("backward needs a scalar loss".into()));
        }
        self.backward_seeded(loss, Tensor::scalar(S::ONE))
    }

    /// Backward from an arbitrary value with an explicit upstream seed.
    pub fn backward_seeded(&self, root: ValueId, seed: Tensor<S>) -> Result<Gradients<S>> {
        if root.0 >= self.nodes.len() {
            return Err(CoreError::State(
                "backward requested for a value not on this tape".into(),
            ));
        }
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(CoreError::Dimension("seed shape mismatch".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(seed);
        }
        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(
        &self,
        id: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let add = |pid: ValueId, grad: Tensor<S>, grads: &mut [Option<Tensor<S>>]| {
            if !self.nodes[pid.0].needs_grad {
                return;
            }
            match &mut grads[pid.0] {
                Some(existing) => existing.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (dx, dw, db) =
                    kernels::affine_backward(self.value(*x), self.value(*w), g)?;
                add(*x, dx, grads);
                add(*w, dw, grads);
                add(*b, db, grads);
            }
            Op::Conv2d { x, k, b, stride, pad } => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*k), g, *stride, *pad)?;
                add(*x, dx, grads);
                add(*k, dk, grads);
                add(*b, db, grads);
            }
            Op::Act { x, act } => {
                let xv = self.value(*x);
                let yv = &self.nodes[id].value;
                let mut dx = Tensor::zeros(xv.shape());
                for ((d, (&xe, &ye)), &ge) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(xv.data().iter().zip(yv.data().iter()))
                    .zip(g.data().iter())
                {
                    *d = ge.mul(act.derivative(xe, ye));
                }
                add(*x, dx, grads);
            }
            Op::Concat { parts } => {
                let shape = self.nodes[id].value.shape().to_vec();
                let batch = shape[0];
                let tail: usize = shape[2..].iter().product();
                let row_len = shape[1] * tail;
                let mut off = 0usize;
                for &p in parts {
                    let pshape = self.value(p).shape().to_vec();
                    let c = pshape[1] * tail;
                    let mut dp = Tensor::zeros(&pshape);
                    {
                        let dpd = dp.data_mut();
                        for bi in 0..batch {
                            dpd[bi * c..(bi + 1) * c].copy_from_slice(
                                &g.data()[bi * row_len + off..bi * row_len + off + c],
                            );
                        }
                    }
                    add(p, dp, grads);
                    off += c;
                }
            }
            Op::Reshape { x } => {
                add(*x, g.reshape(self.value(*x).shape())?, grads);
            }
            Op::Upsample2x { x } => {
                add(*x, kernels::upsample2x_backward(g)?, grads);
            }
            Op::MatmulNT { a, b } => {
                // y = a·bᵀ ⇒ da = g·b, db = gᵀ·a
                add(*a, kernels::matmul(g, self.value(*b))?, grads);
                add(*b, kernels::matmul_tn(g, self.value(*a))?, grads);
            }
            Op::WeightedSum { w, parts } => {
                let k = parts.len();
                let wv = self.value(*w);
                let batch = wv.shape()[0];
                let d = self.value(parts[0]).shape()[1];
                let mut dw: Tensor<S> = Tensor::zeros(&[batch, k]);
                {
                    let dwd = dw.data_mut();
                    for (i, &p) in parts.iter().enumerate() {
                        let pv = self.value(p);
                        for bi in 0..batch {
                            let mut acc = S::ZERO;
                            let grow = &g.data()[bi * d..(bi + 1) * d];
                            let erow = &pv.data()[bi * d..(bi + 1) * d];
                            for (&ge, &ee) in grow.iter().zip(erow.iter()) {
                                acc = acc.add(ge.mul(ee));
                            }
                            dwd[bi * k + i] = acc;
                        }
                    }
                }
                add(*w, dw, grads);
                for (i, &p) in parts.iter().enumerate() {
                    let mut dp: Tensor<S> = Tensor::zeros(&[batch, d]);
                    {
                        let dpd = dp.data_mut();
                        for bi in 0..batch {
                            let we = wv.data()[bi * k + i];
                            let grow = &g.data()[bi * d..(bi + 1) * d];
                            for (o, &ge) in
                                dpd[bi * d..(bi + 1) * d].iter_mut().zip(grow.iter())
                            {
                                *o = we.mul(ge);
                            }
                        }
                    }
                    add(p, dp, grads);
                }
            }
            Op::L1NormalizeRows { x } => {
                let xv = self.value(*x);
                let yv = &self.nodes[id].value;
                let (batch, k) = rank2(xv)?;
                let mut dx: Tensor<S> = Tensor::zeros(&[batch, k]);
                let mut scratch = vec![S::ZERO; k];
                {
                    let dxd = dx.data_mut();
                    for bi in 0..batch {
                        let row = &xv.data()[bi * k..(bi + 1) * k];
                        scratch.copy_from_slice(row);
                        let denom =
                            canonical_sum(&mut scratch).max(S::from_f64(L1_NORM_GUARD));
                        let yrow = &yv.data()[bi * k..(bi + 1) * k];
                        let grow = &g.data()[bi * k..(bi + 1) * k];
                        let mut dot = S::ZERO;
                        for (&ge, &ye) in grow.iter().zip(yrow.iter()) {
                            dot = dot.add(ge.mul(ye));
                        }
                        for (o, &ge) in dxd[bi * k..(bi + 1) * k].iter_mut().zip(grow.iter()) {
                            *o = ge.sub(dot).div(denom);
                        }
                    }
                }
                add(*x, dx, grads);
            }
            Op::L2NormalizeRows { x } => {
                let xv = self.value(*x);
                let yv = &self.nodes[id].value;
                let (batch, k) = rank2(xv)?;
                let mut dx: Tensor<S> = Tensor::zeros(&[batch, k]);
                {
                    let dxd = dx.data_mut();
                    for bi in 0..batch {
                        let row = &xv.data()[bi * k..(bi + 1) * k];
                        let norm = l2_norm(row).max(S::from_f64(L1_NORM_GUARD));
                        let yrow = &yv.data()[bi * k..(bi + 1) * k];
                        let grow = &g.data()[bi * k..(bi + 1) * k];
                        let mut dot = S::ZERO;
                        for (&ge, &ye) in grow.iter().zip(yrow.iter()) {
                            dot = dot.add(ge.mul(ye));
                        }
                        for ((o, &ge), &ye) in dxd[bi * k..(bi + 1) * k]
                            .iter_mut()
                            .zip(grow.iter())
                            .zip(yrow.iter())
                        {
                            *o = ge.sub(ye.mul(dot)).div(norm);
                        }
                    }
                }
                add(*x, dx, grads);
            }
            Op::SoftmaxRows { x } => {
                let yv = &self.nodes[id].value;
                let (batch, k) = rank2(yv)?;
                let mut dx: Tensor<S> = Tensor::zeros(&[batch, k]);
                {
                    let dxd = dx.data_mut();
                    for bi in 0..batch {
                        let yrow = &yv.data()[bi * k..(bi + 1) * k];
                        let grow = &g.data()[bi * k..(bi + 1) * k];
                        let mut dot = S::ZERO;
                        for (&ge, &ye) in grow.iter().zip(yrow.iter()) {
                            dot = dot.add(ge.mul(ye));
                        }
                        for ((o, &ge), &ye) in dxd[bi * k..(bi + 1) * k]
                            .iter_mut()
                            .zip(grow.iter())
                            .zip(yrow.iter())
                        {
                            *o = ye.mul(ge.sub(dot));
                        }
                    }
                }
                add(*x, dx, grads);
            }
            Op::LogSoftmaxRows { x } => {
                let yv = &self.nodes[id].value;
                let (batch, k) = rank2(yv)?;
                let mut dx: Tensor<S> = Tensor::zeros(&[batch, k]);
                {
                    let dxd = dx.data_mut();
                    for bi in 0..batch {
                        let yrow = &yv.data()[bi * k..(bi + 1) * k];
                        let grow = &g.data()[bi * k..(bi + 1) * k];
                        let mut gsum = S::ZERO;
                        for &ge in grow.iter() {
                            gsum = gsum.add(ge);
                        }
                        for ((o, &ge), &ye) in dxd[bi * k..(bi + 1) * k]
                            .iter_mut()
                            .zip(grow.iter())
                            .zip(yrow.iter())
                        {
                            *o = ge.sub(ye.exp().mul(gsum));
                        }
                    }
                }
                add(*x, dx, grads);
            }
            Op::ScaledDot { q, keys, scale } => {
                let qv = self.value(*q);
                let (batch, d) = rank2(qv)?;
                let k = keys.len();
                let sc = S::from_f64(*scale);
                let mut dq: Tensor<S> = Tensor::zeros(&[batch, d]);
                {
                    let dqd = dq.data_mut();
                    for (i, &p) in keys.iter().enumerate() {
                        let pv = self.value(p);
                        for bi in 0..batch {
                            let ge = g.data()[bi * k + i].mul(sc);
                            let krow = &pv.data()[bi * d..(bi + 1) * d];
                            for (o, &ke) in
                                dqd[bi * d..(bi + 1) * d].iter_mut().zip(krow.iter())
                            {
                                *o = o.add(ge.mul(ke));
                            }
                        }
                    }
                }
                add(*q, dq, grads);
                for (i, &p) in keys.iter().enumerate() {
                    let mut dk: Tensor<S> = Tensor::zeros(&[batch, d]);
                    {
                        let dkd = dk.data_mut();
                        for bi in 0..batch {
                            let ge = g.data()[bi * k + i].mul(sc);
                            let qrow = &qv.data()[bi * d..(bi + 1) * d];
                            for (o, &qe) in
                                dkd[bi * d..(bi + 1) * d].iter_mut().zip(qrow.iter())
                            {
                                *o = ge.mul(qe);
                            }
                        }
                    }
                    add(p, dk, grads);
                }
            }
            Op::GatherCols { x, idx } => {
                let xv = self.value(*x);
                let (_, k) = rank2(xv)?;
                let mut dx = Tensor::zeros(xv.shape());
                {
                    let dxd = dx.data_mut();
                    for (bi, &ix) in idx.iter().enumerate() {
                        dxd[bi * k + ix] = g.data()[bi];
                    }
                }
                add(*x, dx, grads);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = self.value(*logits);
                let (batch, k) = rank2(lv)?;
                let sm = softmax_rows_value(lv)?;
                let gscale = g.item().div(S::from_f64(batch as f64));
                let mut dx = sm;
                {
                    let dxd = dx.data_mut();
                    for (bi, &t) in targets.iter().enumerate() {
                        dxd[bi * k + t] = dxd[bi * k + t].sub(S::ONE);
                    }
                    for v in dxd.iter_mut() {
                        *v = v.mul(gscale);
                    }
                }
                add(*logits, dx, grads);
            }
            Op::Add { a, b } => {
                add(*a, g.clone(), grads);
                add(*b, g.clone(), grads);
            }
            Op::Sub { a, b } => {
                add(*a, g.clone(), grads);
                add(*b, g.map(|e| e.neg()), grads);
            }
            Op::Mul { a, b } => {
                add(*a, g.zip_map(self.value(*b), |ge, be| ge.mul(be))?, grads);
                add(*b, g.zip_map(self.value(*a), |ge, ae| ge.mul(ae))?, grads);
            }
            Op::MinElem { a, b } => {
                let take_a = self.value(*a).zip_map(self.value(*b), |x, y| {
                    if x.to_f64() <= y.to_f64() {
                        S::ONE
                    } else {
                        S::ZERO
                    }
                })?;
                let da = g.zip_map(&take_a, |ge, m| ge.mul(m))?;
                let db = g.zip_map(&take_a, |ge, m| ge.mul(S::ONE.sub(m)))?;
                add(*a, da, grads);
                add(*b, db, grads);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let dx = g.zip_map(xv, |ge, xe| {
                    let v = xe.to_f64();
                    if v >= *lo && v <= *hi {
                        ge
                    } else {
                        S::ZERO
                    }
                })?;
                add(*x, dx, grads);
            }
            Op::Exp { x } => {
                add(*x, g.zip_map(&self.nodes[id].value, |ge, ye| ge.mul(ye))?, grads);
            }
            Op::Square { x } => {
                let two = S::from_f64(2.0);
                add(
                    *x,
                    g.zip_map(self.value(*x), |ge, xe| ge.mul(two).mul(xe))?,
                    grads,
                );
            }
            Op::Scale { x, c } => {
                let cc = S::from_f64(*c);
                add(*x, g.map(|ge| ge.mul(cc)), grads);
            }
            Op::SumRows { x } => {
                let xv = self.value(*x);
                let (batch, k) = rank2(xv)?;
                let mut dx: Tensor<S> = Tensor::zeros(&[batch, k]);
                {
                    let dxd = dx.data_mut();
                    for bi in 0..batch {
                        let ge = g.data()[bi];
                        for o in dxd[bi * k..(bi + 1) * k].iter_mut() {
                            *o = ge;
                        }
                    }
                }
                add(*x, dx, grads);
            }
            Op::SumAll { x } => {
                let ge = g.item();
                add(*x, Tensor::filled(self.value(*x).shape(), ge), grads);
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).len();
                let ge = g.item().div(S::from_f64(n as f64));
                add(*x, Tensor::filled(self.value(*x).shape(), ge), grads);
            }
        }
        Ok(())
    }
}

fn rank2<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        other => Err(CoreError::Dimension(format!(
            "expected rank 2, got {other:?}"
        ))),
    }
}

fn row_max<S: Scalar>(row: &[S]) -> S {
    let mut m = row[0];
    for &v in &row[1..] {
        m = m.max(v);
    }
    m
}

fn l2_norm<S: Scalar>(row: &[S]) -> S {
    let mut acc = S::ZERO;
    for &v in row {
        acc = acc.add(v.mul(v));
    }
    acc.sqrt()
}

fn softmax_rows_value<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let (batch, k) = rank2(t)?;
    let mut out = Tensor::zeros(&[batch, k]);
    let mut scratch = vec![S::ZERO; k];
    {
        let od = out.data_mut();
        let xd = t.data();
        for bi in 0..batch {
            let row = &xd[bi * k..(bi + 1) * k];
            let m = row_max(row);
            for (s, &v) in scratch.iter_mut().zip(row.iter()) {
                *s = v.sub(m).exp();
            }
            let orow = &mut od[bi * k..(bi + 1) * k];
            orow.copy_from_slice(&scratch);
            let denom = canonical_sum(&mut scratch);
            for o in orow.iter_mut() {
                *o = o.div(denom);
            }
        }
    }
    Ok(out)
}

/// Binds [`ParamSet`] entries onto a tape by name. Frozen parameters enter as
/// constants, trainable ones as gradient leaves, each bound at most once.
pub struct TapeBinder<'p, S: Scalar> {
    pub tape: Tape<S>,
    params: &'p ParamSet<S>,
    bound: HashMap<String, ValueId>,
}

impl<'p, S: Scalar> TapeBinder<'p, S> {
    pub fn new(params: &'p ParamSet<S>) -> Self {
        TapeBinder {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &ParamSet<S> {
        self.params
    }

    pub fn bind(&mut self, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self.params.get(name)?;
        let id = if p.frozen {
            self.tape.input(p.tensor.clone())
        } else {
            self.tape.param(p.tensor.clone())
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Run backward from a scalar loss and collect per-parameter gradients.
    /// Frozen parameters never appear in the result.
    pub fn backward(&self, loss: ValueId) -> Result<GradSet<S>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = GradSet::new();
        // Canonical parameter order, not map order.
        for p in self.params.iter() {
            if let Some(&id) = self.bound.get(&p.name) {
                if let Some(g) = grads.take(id) {
                    out.insert(&p.name, g);
                }
            }
        }
        Ok(out)
    }
}
