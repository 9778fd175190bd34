//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. Nodes are appended in evaluation order, so walking the
//! node list backwards is a valid reverse topological order and each node is
//! visited exactly once by [`Tape::backward`].

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Lower clamp for probabilities entering a log.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A scalar loss together with the number of supervised entries it averaged
/// over. `count == 0` flags empty supervision; the value is then exactly 0.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub var: Var,
    pub count: f64,
}

impl Loss {
    pub fn is_empty(&self) -> bool {
        self.count == 0.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Embedding { table: Var, indices: Vec<usize> },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Sum { a: Var },
    MaskedMean { a: Var, mask: Vec<f64>, count: f64 },
    Bce { p: Var, targets: Vec<f64>, mask: Vec<f64>, count: f64 },
    MaskedMse { pred: Var, targets: Vec<f64>, mask: Vec<f64>, count: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// A tape is single-use per forward pass and is not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    training: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape in training mode applies dropout; otherwise dropout is identity.
    pub fn with_training(training: bool) -> Self {
        Self {
            training,
            ..Self::default()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------
    // leaves
    // ----------------------------------------------------------------

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is retained on the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Gradients flowing into the
    /// returned node are added to the store's gradient buffer by `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    // ----------------------------------------------------------------
    // linear algebra
    // ----------------------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a 2-D `[k, n]` matrix applied to every leading index of
    /// `a: [..., m, k]`, or has the same rank and leading dims as `a`, in which
    /// case the product is taken batch by batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || AutodiffError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let (out_shape, batched) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(err());
            }
            let mut s = sa.clone();
            *s.last_mut().unwrap() = sb[1];
            (s, false)
        } else {
            if sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k {
                return Err(err());
            }
            let mut s = sa.clone();
            *s.last_mut().unwrap() = sb[sb.len() - 1];
            (s, true)
        };
        let n = *out_shape.last().unwrap();
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let ad = self.val(a);
            let bd = self.val(b);
            if batched {
                let m = sa[sa.len() - 2];
                let batches = ad.len() / (m * k);
                for i in 0..batches {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..],
                        (k as isize, 1),
                        &bd[i * k * n..],
                        (n as isize, 1),
                        &mut out[i * m * n..],
                        0.0,
                    );
                }
            } else {
                let m = ad.len() / k;
                gemm(m, k, n, ad, (k as isize, 1), bd, (n as isize, 1), &mut out, 0.0);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul { a, b, batched }, rg))
    }

    // ----------------------------------------------------------------
    // elementwise binary (b broadcasts when its shape is a suffix of a's)
    // ----------------------------------------------------------------

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let ad = self.val(a);
        let bd = self.val(b);
        let nb = bd.len();
        let out: Vec<f64> = ad.iter().enumerate().map(|(i, x)| x + bd[i % nb]).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let ad = self.val(a);
        let bd = self.val(b);
        let nb = bd.len();
        let out: Vec<f64> = ad.iter().enumerate().map(|(i, x)| x * bd[i % nb]).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale { a, factor }, rg)
    }

    // ----------------------------------------------------------------
    // structural
    // ----------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            let compatible = same_rank && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.val(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `a[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(AutodiffError::Index {
                op: "slice",
                index: start + len,
                bound: s.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.val(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(AutodiffError::InvalidArgument(format!(
                "invalid permutation {perm:?} for shape {s:?}"
            )));
        }
        let (out, out_shape) = permute_data(self.val(a), &s, perm);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of `table: [V, D]`; output shape is `index_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::Shape {
                op: "embedding",
                lhs: s,
                rhs: index_shape.to_vec(),
            });
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(AutodiffError::Shape {
                op: "embedding",
                lhs: vec![indices.len()],
                rhs: index_shape.to_vec(),
            });
        }
        let (v, d) = (s[0], s[1]);
        let src = self.val(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(AutodiffError::Index {
                    op: "embedding",
                    index: i,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut out_shape = index_shape.to_vec();
        out_shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------------
    // elementwise unary
    // ----------------------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let mut out = self.val(a).to_vec();
        for row in out.chunks_mut(d) {
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
        let rg = self.rg(a);
        self.push(Tensor::from_parts(s, out), Op::Softmax { a }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let mut out = self.val(a).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(s, out), Op::LayerNorm { a, inv_std }, rg)
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    /// Identity when the tape is not in training mode or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.val(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { a, mask }, rg))
    }

    // ----------------------------------------------------------------
    // reductions and losses
    // ----------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.val(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    /// `Σ mask·a / max(Σ mask, 1)`.
    pub fn masked_mean(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        self.check_len("masked_mean", a, mask.len())?;
        let count: f64 = mask.iter().sum();
        let total: f64 = self.val(a).iter().zip(mask).map(|(x, m)| x * m).sum();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(total / count.max(1.0)),
            Op::MaskedMean {
                a,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Binary cross-entropy averaged over entries where `mask` is set.
    /// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], mask: &[f64]) -> Result<Loss> {
        self.check_len("bce", p, targets.len())?;
        self.check_len("bce", p, mask.len())?;
        let count: f64 = mask.iter().sum();
        let mut total = 0.0;
        for ((&pi, &y), &m) in self.val(p).iter().zip(targets).zip(mask) {
            if m != 0.0 {
                let q = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
                total -= m * (y * q.ln() + (1.0 - y) * (1.0 - q).ln());
            }
        }
        let value = if count > 0.0 { total / count } else { 0.0 };
        let rg = self.rg(p);
        let var = self.push(
            Tensor::scalar(value),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        );
        Ok(Loss { var, count })
    }

    /// `Σ mask·(target − pred)² / max(Σ mask, 1)`.
    pub fn masked_mse(&mut self, pred: Var, targets: &[f64], mask: &[f64]) -> Result<Loss> {
        self.check_len("masked_mse", pred, targets.len())?;
        self.check_len("masked_mse", pred, mask.len())?;
        let count: f64 = mask.iter().sum();
        let total: f64 = self
            .val(pred)
            .iter()
            .zip(targets)
            .zip(mask)
            .map(|((p, t), m)| m * (t - p) * (t - p))
            .sum();
        let rg = self.rg(pred);
        let var = self.push(
            Tensor::scalar(total / count.max(1.0)),
            Op::MaskedMse {
                pred,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        );
        Ok(Loss { var, count })
    }

    fn check_len(&self, op: &'static str, a: Var, len: usize) -> Result<()> {
        if self.value(a).numel() == len {
            Ok(())
        } else {
            Err(AutodiffError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: vec![len],
            })
        }
    }

    // ----------------------------------------------------------------
    // backward
    // ----------------------------------------------------------------

    /// Propagates d`loss`/d(node) through the tape and adds parameter
    /// gradients into `store`. Calling it again accumulates.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }

        if self.grads.len() < grads.len() {
            self.grads.resize_with(grads.len(), || None);
        }
        for (slot, g) in self.grads.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul { a, b, batched } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let ad = self.val(*a);
                let bd = self.val(*b);
                if *batched {
                    let m = sa[sa.len() - 2];
                    let batches = ad.len() / (m * k);
                    if self.rg(*a) {
                        let ga = grad_slot(grads, *a, ad.len());
                        for t in 0..batches {
                            // dA = dC · Bᵀ
                            gemm(m, n, k, &g[t * m * n..], (n as isize, 1), &bd[t * k * n..], (1, n as isize), &mut ga[t * m * k..], 1.0);
                        }
                    }
                    if self.rg(*b) {
                        let gb = grad_slot(grads, *b, bd.len());
                        for t in 0..batches {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, &ad[t * m * k..], (1, k as isize), &g[t * m * n..], (n as isize, 1), &mut gb[t * k * n..], 1.0);
                        }
                    }
                } else {
                    let m = ad.len() / k;
                    if self.rg(*a) {
                        let ga = grad_slot(grads, *a, ad.len());
                        gemm(m, n, k, g, (n as isize, 1), bd, (1, n as isize), ga, 1.0);
                    }
                    if self.rg(*b) {
                        let gb = grad_slot(grads, *b, bd.len());
                        gemm(k, m, n, ad, (1, k as isize), g, (n as isize, 1), gb, 1.0);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    let ga = grad_slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    let gb = grad_slot(grads, *b, nb);
                    for (idx, y) in g.iter().enumerate() {
                        gb[idx % nb] += y;
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = self.val(*a);
                let bd = self.val(*b);
                let nb = bd.len();
                if self.rg(*a) {
                    let ga = grad_slot(grads, *a, g.len());
                    for (idx, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                        *x += y * bd[idx % nb];
                    }
                }
                if self.rg(*b) {
                    let gb = grad_slot(grads, *b, nb);
                    for (idx, y) in g.iter().enumerate() {
                        gb[idx % nb] += y * ad[idx];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let ga = grad_slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let gp = grad_slot(grads, p, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a);
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let ga = grad_slot(grads, *a, self.value(*a).numel());
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    ga[base..base + len * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
            Op::Reshape { a } => {
                let ga = grad_slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                let ga = grad_slot(grads, *a, g.len());
                ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
            Op::Embedding { table, indices } => {
                let s = self.shape(*table);
                let d = s[1];
                let gt = grad_slot(grads, *table, s[0] * d);
                for (row, &idx) in indices.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    gt[idx * d..(idx + 1) * d].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let ga = grad_slot(grads, *a, g.len());
                for ((x, gy), yy) in ga.iter_mut().zip(g).zip(y) {
                    *x += gy * yy * (1.0 - yy);
                }
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let ga = grad_slot(grads, *a, g.len());
                for ((x, gy), yy) in ga.iter_mut().zip(g).zip(y) {
                    *x += gy * (1.0 - yy * yy);
                }
            }
            Op::Relu { a } => {
                let src = self.val(*a);
                let ga = grad_slot(grads, *a, g.len());
                for ((x, gy), s) in ga.iter_mut().zip(g).zip(src) {
                    if *s > 0.0 {
                        *x += gy;
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                let src = self.val(*a);
                let ga = grad_slot(grads, *a, g.len());
                for ((x, gy), s) in ga.iter_mut().zip(g).zip(src) {
                    if *s >= *lo && *s <= *hi {
                        *x += gy;
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let ga = grad_slot(grads, *a, g.len());
                for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((x, gy), yy) in xr.iter_mut().zip(gr).zip(yr) {
                        *x += yy * (gy - dot);
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let ga = grad_slot(grads, *a, g.len());
                for (((gr, yr), xr), r) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    for ((x, gy), yy) in xr.iter_mut().zip(gr).zip(yr) {
                        *x += r * (gy - mean_g - yy * mean_gy);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let ga = grad_slot(grads, *a, g.len());
                for ((x, gy), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += gy * m;
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                let ga = grad_slot(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::MaskedMean { a, mask, count } => {
                let scale = g[0] / count.max(1.0);
                let ga = grad_slot(grads, *a, mask.len());
                for (x, m) in ga.iter_mut().zip(mask) {
                    *x += scale * m;
                }
            }
            Op::Bce { p, targets, mask, count } => {
                if *count == 0.0 {
                    return;
                }
                let pd = self.val(*p);
                let scale = g[0] / count;
                let gp = grad_slot(grads, *p, mask.len());
                for (((x, &pi), &y), &m) in gp.iter_mut().zip(pd).zip(targets).zip(mask) {
                    if m == 0.0 || !(PROB_EPS..=1.0 - PROB_EPS).contains(&pi) {
                        continue;
                    }
                    *x += scale * m * ((1.0 - y) / (1.0 - pi) - y / pi);
                }
            }
            Op::MaskedMse {
                pred,
                targets,
                mask,
                count,
            } => {
                let pd = self.val(*pred);
                let scale = 2.0 * g[0] / count.max(1.0);
                let gp = grad_slot(grads, *pred, mask.len());
                for (((x, p), t), m) in gp.iter_mut().zip(pd).zip(targets).zip(mask) {
                    *x += scale * m * (p - t);
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
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

/// `c = a·b + beta·c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64], beta: f64) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided m×k, k×n and m×n
    // extents; matrixmultiply reads/writes only within those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
        tape.backward(y, &mut ParamStore::new()).unwrap();
        assert_eq!(tape.grad(x).unwrap()[0], 0.25);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, &mut ParamStore::new()).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 9.0);
        assert_eq!(tape.grad(x).unwrap()[0], 6.0);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let i = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1., 1., 1.]));
        let y = tape.softmax(a);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_closed_form() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.5));
        let l = tape.bce(p, &[1.0], &[1.0]).unwrap();
        assert!((tape.value(l.var).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn masked_mse_cases() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[0.5, 0.5]));
        let l = tape.masked_mse(p, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(tape.value(l.var).item().unwrap(), 0.25);
        let empty = tape.masked_mse(p, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(tape.value(empty.var).item().unwrap(), 0.0);
        let empty_bce = tape.bce(p, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(empty_bce.is_empty());
        assert_eq!(tape.value(empty_bce.var).item().unwrap(), 0.0);
    }

    #[test]
    fn bce_clamps_extremes() {
        let mut tape = Tape::new();
        let p = tape.input(t(&[2], &[0.0, 1.0]));
        let l = tape.bce(p, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        let v = tape.value(l.var).item().unwrap();
        assert!(v.is_finite());
        assert!((v + (PROB_EPS).ln()).abs() < 1e-9);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::with_training(false);
        let a = tape.constant(Tensor::full(&[100], 1.0));
        let y = tape.dropout(a, 0.5, &mut rng).unwrap();
        assert_eq!(y, a);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::with_training(true);
        let a = tape.constant(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(a, 0.25, &mut rng).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        assert!((650..850).contains(&kept), "kept {kept}");
        assert!(tape.dropout(a, 1.0, &mut rng).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(a, &mut ParamStore::new()),
            Err(AutodiffError::NotScalar(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let y = tape.mul(w, w).unwrap();
        tape.backward(y, &mut store).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data()[0], 8.0);
        store.zero_grad();
        assert_eq!(store.get(id).grad.data()[0], 0.0);
    }

    #[test]
    fn permute_roundtrip() {
        let data: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let (p, s) = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // out[k][i][j] = in[i][j][k]
        assert_eq!(p[1 * 6 + 0 * 3 + 2], data[0 * 12 + 2 * 4 + 1]);
        let (back, s2) = permute_data(&p, &s, &[1, 2, 0]);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn suffix_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2], &[10., 20.]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 13., 24.]);
        let bad = tape.constant(t(&[3], &[0., 0., 0.]));
        assert!(tape.add(a, bad).is_err());
    }
}
