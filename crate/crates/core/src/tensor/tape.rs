//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward operation appends a node holding its output value and enough
//! saved state to run the backward formula. [`Tape::backward`] then walks the
//! nodes in reverse, accumulating gradients. Parameters are bound to the tape
//! by identity, so inserting the same [`Param`] twice (weight tying) yields a
//! single node whose gradient collects contributions from every use.
//!
//! Gradients are only propagated into nodes that require them, so frozen
//! parameters cost nothing at backward time.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::DetRng;
use crate::tensor::{Scalar, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

/// Process-unique identity of a [`Param`], used to deduplicate tape bindings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u32);

static NEXT_PARAM_ID: AtomicU32 = AtomicU32::new(0);

/// A named, optionally trainable tensor that outlives individual tapes.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    name: String,
    id: ParamId,
    pub value: Tensor<T>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let id = ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed));
        Param { name: name.into(), id, value, trainable: true }
    }

    /// A parameter that participates in the forward pass but never receives
    /// gradients (e.g. a frozen base model under LoRA).
    pub fn frozen(name: impl Into<String>, value: Tensor<T>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// A collection of parameters walkable in a stable, repeatable order.
///
/// The optimizer keys its per-parameter state by visitation order, and the
/// checkpoint writer keys tensors by parameter name, so implementations must
/// visit the same parameters in the same order every time.
pub trait ParamSet<T: Scalar> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_| n += 1);
        n
    }

    /// Total number of scalar elements across all parameters.
    fn total_numel(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.numel());
        n
    }

    /// Total over trainable parameters only.
    fn trainable_numel(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| {
            if p.trainable() {
                n += p.numel();
            }
        });
        n
    }
}

impl<T: Scalar> ParamSet<T> for Vec<Param<T>> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in self {
            f(p);
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in self {
            f(p);
        }
    }
}

/// Saved per-row normalization statistics for the LayerNorm backward pass.
#[derive(Clone, Debug)]
struct NormStats<T> {
    mean: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    AddBias { x: NodeId, bias: NodeId },
    Mul(NodeId, NodeId),
    Scale { x: NodeId, c: T },
    /// `[m,k] x [k,n] -> [m,n]`
    Matmul { a: NodeId, b: NodeId },
    /// `[m,k] x [n,k]^T -> [m,n]` (linear layers, tied-embedding logits)
    MatmulTb { a: NodeId, b: NodeId },
    /// `[g,m,k] x [g,k,n] -> [g,m,n]`, or `[g,n,k]` per batch when `trans_b`
    BatchMatmul { a: NodeId, b: NodeId, trans_b: bool },
    /// Position-bias scores: `qv [g,t,dk]` against `rproj [h,l,dk]` where
    /// group `g` uses head `g % h`; output `[g,t,l]`.
    RelScores { qv: NodeId, rproj: NodeId },
    /// Select per-(query,key) relative positions out of `[g,t,l]` scores,
    /// `l = 2*max_dist+1`, producing `[g,t,t_keys]`.
    RelSelect { x: NodeId, t_keys: usize, max_dist: usize },
    Reshape { x: NodeId },
    ConcatRows { xs: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    /// `[b*t, h*dk] -> [b*h, t, dk]`
    SplitHeads { x: NodeId, b: usize, t: usize, h: usize, dk: usize },
    /// `[b*h, t, dk] -> [b*t, h*dk]`
    MergeHeads { x: NodeId, b: usize, t: usize, h: usize, dk: usize },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Swish { x: NodeId },
    Glu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: NormStats<T> },
    /// `x [b,ci,t,f]`, `w [co,ci,kh,kw]`, same stride/pad on both spatial axes.
    Conv2d { x: NodeId, w: NodeId, bias: NodeId, stride: usize, pad: usize },
    /// `[b,c,t,f] -> [b*t, c*f]`
    FlattenCf { x: NodeId },
    /// `x [b,t,c]`, `w [c,k]` (odd `k`, zero-padded same-length output).
    DepthwiseConv1d { x: NodeId, w: NodeId, bias: NodeId },
    Embedding { table: NodeId, ids: Vec<u32> },
    /// Masked mean token cross-entropy from raw logits `[n,v]`.
    CrossEntropy { logits: NodeId, targets: Vec<u32>, mask: Vec<u8> },
    /// `mask` already folds in the 1/(1-p) inverted-dropout scaling.
    Dropout { x: NodeId, mask: Vec<T> },
    SumAll { x: NodeId },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// The tape. Create one per forward/backward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<ParamId, NodeId>,
    training: bool,
}

impl<T: Scalar> Tape<T> {
    /// A tape for training: trainable parameters require gradients and
    /// dropout is active.
    pub fn training() -> Self {
        Tape { nodes: Vec::new(), bound: BTreeMap::new(), training: true }
    }

    /// A tape for inference: nothing requires gradients, dropout is identity.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), bound: BTreeMap::new(), training: false }
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

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0 as usize].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0 as usize].grad.as_ref()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0 as usize].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0 as usize].value.shape()
    }

    /// Insert a constant (no gradient) tensor.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Insert an input that should receive a gradient (used by the finite
    /// difference harness to differentiate with respect to activations).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Bind a parameter. Repeated binds of the same parameter return the same
    /// node, so tied weights accumulate gradients from all of their uses.
    pub fn param(&mut self, p: &Param<T>) -> NodeId {
        if let Some(&id) = self.bound.get(&p.id) {
            return id;
        }
        let requires = self.training && p.trainable;
        let id = self.push(p.value.clone(), requires, Op::Leaf);
        self.bound.insert(p.id, id);
        id
    }

    /// Gradient accumulated for a bound parameter, if any.
    pub fn param_grad(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.bound.get(&p.id).and_then(|&id| self.grad(id))
    }

    // ----------------------------------------------------------------- ops

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = par::map_range(va.numel(), |i| va.data()[i] + vb.data()[i]);
        let value = Tensor::new(va.shape().to_vec(), data);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Add(a, b)))
    }

    /// Broadcast-add a `[n]` bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.shape(x).last().copied().unwrap_or(0);
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("x {:?} vs bias {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let (vx, vb) = (self.value(x), self.value(bias));
        let bd = vb.data();
        let data = par::map_range(vx.numel(), |i| vx.data()[i] + bd[i % n]);
        let value = Tensor::new(vx.shape().to_vec(), data);
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(value, req, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = par::map_range(va.numel(), |i| va.data()[i] * vb.data()[i]);
        let value = Tensor::new(va.shape().to_vec(), data);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::from_f64(c);
        let vx = self.value(x);
        let value = vx.map(|v| v * c);
        let req = self.requires(x);
        self.push(value, req, Op::Scale { x, c })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?}: inner dimensions must agree"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], data), req, Op::Matmul { a, b }))
    }

    /// `a [m,k]` times `b [n,k]` transposed: the natural layout for linear
    /// layer weights stored as `[out, in]`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(
                "matmul_tb",
                format!("{sa:?} x {sb:?}^T: inner dimensions must agree"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], data), req, Op::MatmulTb { a, b }))
    }

    /// Linear layer: `x @ w^T (+ bias)` with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul_tb(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); g * m * n];
        par::for_each_chunk_mut(&mut out, n, |row, chunk| {
            let (gi, mi) = (row / m, row % m);
            let ar = &va[(gi * m + mi) * k..(gi * m + mi + 1) * k];
            let bb = &vb[gi * k * n..(gi + 1) * k * n];
            if trans_b {
                for (ni, o) in chunk.iter_mut().enumerate() {
                    let br = &bb[ni * k..(ni + 1) * k];
                    let mut acc = T::zero();
                    for ki in 0..k {
                        acc = acc + ar[ki] * br[ki];
                    }
                    *o = acc;
                }
            } else {
                for ki in 0..k {
                    let av = ar[ki];
                    let br = &bb[ki * n..(ki + 1) * n];
                    for (o, &bv) in chunk.iter_mut().zip(br) {
                        *o = *o + av * bv;
                    }
                }
            }
        });
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out),
            req,
            Op::BatchMatmul { a, b, trans_b },
        ))
    }

    /// Scores of queries against a per-head table of relative-position
    /// embeddings: `qv [g,t,dk]`, `rproj [h,l,dk]`, `h` dividing `g`,
    /// giving `[g,t,l]`.
    pub fn rel_scores(&mut self, qv: NodeId, rproj: NodeId) -> Result<NodeId> {
        let (sq, sr) = (self.shape(qv), self.shape(rproj));
        let ok = sq.len() == 3 && sr.len() == 3 && sq[2] == sr[2] && sr[0] > 0
            && sq[0] % sr[0] == 0;
        if !ok {
            return Err(Error::shape(
                "rel_scores",
                format!("qv {sq:?} vs rproj {sr:?}"),
            ));
        }
        let (g, t, dk) = (sq[0], sq[1], sq[2]);
        let (h, l) = (sr[0], sr[1]);
        let (vq, vr) = (self.value(qv).data(), self.value(rproj).data());
        let mut out = vec![T::zero(); g * t * l];
        par::for_each_chunk_mut(&mut out, l, |row, chunk| {
            let (gi, ti) = (row / t, row % t);
            let q = &vq[(gi * t + ti) * dk..(gi * t + ti + 1) * dk];
            let rh = &vr[(gi % h) * l * dk..((gi % h) + 1) * l * dk];
            for (li, o) in chunk.iter_mut().enumerate() {
                let r = &rh[li * dk..(li + 1) * dk];
                let mut acc = T::zero();
                for c in 0..dk {
                    acc = acc + q[c] * r[c];
                }
                *o = acc;
            }
        });
        let req = self.requires(qv) || self.requires(rproj);
        Ok(self.push(
            Tensor::new(vec![g, t, l], out),
            req,
            Op::RelScores { qv, rproj },
        ))
    }

    /// Map position-indexed scores `[g,t,2*max_dist+1]` to per-key scores
    /// `[g,t,t_keys]`: entry `(i,j)` reads offset `clamp(i-j)` of row `i`.
    pub fn rel_select(&mut self, x: NodeId, t_keys: usize, max_dist: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[2] != 2 * max_dist + 1 {
            return Err(Error::shape(
                "rel_select",
                format!("{sx:?} with max_dist {max_dist}: last dim must be {}", 2 * max_dist + 1),
            ));
        }
        let (g, t, l) = (sx[0], sx[1], sx[2]);
        let vx = self.value(x).data();
        let m = max_dist as isize;
        let mut out = vec![T::zero(); g * t * t_keys];
        par::for_each_chunk_mut(&mut out, t_keys, |row, chunk| {
            let (gi, ti) = (row / t, row % t);
            let src = &vx[(gi * t + ti) * l..(gi * t + ti + 1) * l];
            for (j, o) in chunk.iter_mut().enumerate() {
                let d = (ti as isize - j as isize).clamp(-m, m) + m;
                *o = src[d as usize];
            }
        });
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![g, t, t_keys], out),
            req,
            Op::RelSelect { x, t_keys, max_dist },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}: element counts differ", self.shape(x)),
            ));
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec());
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Reshape { x }))
    }

    /// Stack 2-D blocks with a common trailing dimension along rows.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let d = self.shape(xs[0]).last().copied().unwrap_or(0);
        let mut rows = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("expected [*, {d}], got {s:?}"),
                ));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * d);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let req = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(
            Tensor::new(vec![rows, d], data),
            req,
            Op::ConcatRows { xs: xs.to_vec() },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {s:?}", start + len),
            ));
        }
        let d = s[1];
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let req = self.requires(x);
        Ok(self.push(Tensor::new(vec![len, d], data), req, Op::SliceRows { x, start }))
    }

    /// `[b*t, h*dk] -> [b*h, t, dk]` so heads become independent batch groups.
    pub fn split_heads(&mut self, x: NodeId, b: usize, t: usize, h: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != b * t || s[1] % h != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("{s:?} with b={b} t={t} h={h}"),
            ));
        }
        let dk = s[1] / h;
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); b * h * t * dk];
        par::for_each_chunk_mut(&mut out, dk, |row, chunk| {
            let (bh, ti) = (row / t, row % t);
            let (bi, hi) = (bh / h, bh % h);
            let src = &vx[(bi * t + ti) * (h * dk) + hi * dk..][..dk];
            chunk.copy_from_slice(src);
        });
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![b * h, t, dk], out),
            req,
            Op::SplitHeads { x, b, t, h, dk },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, b: usize, h: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != b * h {
            return Err(Error::shape(
                "merge_heads",
                format!("{s:?} with b={b} h={h}"),
            ));
        }
        let (t, dk) = (s[1], s[2]);
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); b * t * h * dk];
        par::for_each_chunk_mut(&mut out, dk, |row, chunk| {
            // Row index enumerates (bi, ti, hi) in the output layout.
            let (bt, hi) = (row / h, row % h);
            let (bi, ti) = (bt / t, bt % t);
            let src = &vx[((bi * h + hi) * t + ti) * dk..][..dk];
            chunk.copy_from_slice(src);
        });
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![b * t, h * dk], out),
            req,
            Op::MergeHeads { x, b, t, h, dk },
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let n = s.last().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::shape("softmax", format!("empty last dim in {s:?}")));
        }
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); vx.len()];
        par::for_each_chunk_mut(&mut out, n, |row, chunk| {
            softmax_row(&vx[row * n..(row + 1) * n], chunk);
        });
        let value = Tensor::new(s.to_vec(), out);
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Softmax { x }))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let n = s.last().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::shape("log_softmax", format!("empty last dim in {s:?}")));
        }
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); vx.len()];
        par::for_each_chunk_mut(&mut out, n, |row, chunk| {
            let src = &vx[row * n..(row + 1) * n];
            let lse = log_sum_exp(src);
            for (o, &v) in chunk.iter_mut().zip(src) {
                *o = v - lse;
            }
        });
        let value = Tensor::new(s.to_vec(), out);
        let req = self.requires(x);
        Ok(self.push(value, req, Op::LogSoftmax { x }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let req = self.requires(x);
        self.push(value, req, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid_scalar);
        let req = self.requires(x);
        self.push(value, req, Op::Sigmoid { x })
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * sigmoid_scalar(v));
        let req = self.requires(x);
        self.push(value, req, Op::Swish { x })
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` where the axis
    /// splits in half into `(a, b)`.
    pub fn glu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let n = s.last().copied().unwrap_or(0);
        if n == 0 || n % 2 != 0 {
            return Err(Error::shape("glu", format!("last dim of {s:?} must be even")));
        }
        let half = n / 2;
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); vx.len() / 2];
        par::for_each_chunk_mut(&mut out, half, |row, chunk| {
            let src = &vx[row * n..(row + 1) * n];
            for (i, o) in chunk.iter_mut().enumerate() {
                *o = src[i] * sigmoid_scalar(src[half + i]);
            }
        });
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = half;
        let req = self.requires(x);
        Ok(self.push(Tensor::new(shape, out), req, Op::Glu { x }))
    }

    /// Layer normalization over the last axis with learned `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        let n = s.last().copied().unwrap_or(0);
        if n == 0 || self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {s:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = self.value(x).numel() / n;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let vx = self.value(x).data();
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); vx.len()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        // Stats are tiny; compute them sequentially, then normalize rows in
        // parallel.
        let inv_n = T::from_f64(1.0 / n as f64);
        for r in 0..rows {
            let src = &vx[r * n..(r + 1) * n];
            let mut m = T::zero();
            for &v in src {
                m = m + v;
            }
            m = m * inv_n;
            let mut var = T::zero();
            for &v in src {
                let d = v - m;
                var = var + d * d;
            }
            var = var * inv_n;
            mean[r] = m;
            rstd[r] = T::one() / (var + eps).sqrt();
        }
        par::for_each_chunk_mut(&mut out, n, |row, chunk| {
            let src = &vx[row * n..(row + 1) * n];
            let (m, rs) = (mean[row], rstd[row]);
            for (i, o) in chunk.iter_mut().enumerate() {
                *o = (src[i] - m) * rs * vg[i] + vb[i];
            }
        });
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(s.to_vec(), out),
            req,
            Op::LayerNorm { x, gamma, beta, stats: NormStats { mean, rstd } },
        ))
    }

    /// 2-D convolution, `x [b,ci,t,f]`, `w [co,ci,kh,kw]`, `bias [co]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || self.shape(bias) != [sw[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("x {sx:?}, w {sw:?}, bias {:?}", self.shape(bias)),
            ));
        }
        let (b, ci, t, f) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if t + 2 * pad < kh || f + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} smaller than kernel {sw:?} at pad {pad}"),
            ));
        }
        let to = (t + 2 * pad - kh) / stride + 1;
        let fo = (f + 2 * pad - kw) / stride + 1;
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let vb = self.value(bias).data();
        let mut out = vec![T::zero(); b * co * to * fo];
        par::for_each_chunk_mut(&mut out, to * fo, |plane, chunk| {
            let (bi, coi) = (plane / co, plane % co);
            for ti in 0..to {
                for fi in 0..fo {
                    let mut acc = vb[coi];
                    for cii in 0..ci {
                        for khi in 0..kh {
                            let tin = (ti * stride + khi) as isize - pad as isize;
                            if tin < 0 || tin >= t as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let fin = (fi * stride + kwi) as isize - pad as isize;
                                if fin < 0 || fin >= f as isize {
                                    continue;
                                }
                                let xi = ((bi * ci + cii) * t + tin as usize) * f + fin as usize;
                                let wi = ((coi * ci + cii) * kh + khi) * kw + kwi;
                                acc = acc + vx[xi] * vw[wi];
                            }
                        }
                    }
                    chunk[ti * fo + fi] = acc;
                }
            }
        });
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![b, co, to, fo], out),
            req,
            Op::Conv2d { x, w, bias, stride, pad },
        ))
    }

    /// `[b,c,t,f] -> [b*t, c*f]`: bring time outermost and flatten channels
    /// with frequency, as the projection after convolutional subsampling
    /// expects.
    pub fn flatten_cf(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("flatten_cf", format!("expected 4-D, got {s:?}")));
        }
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); vx.len()];
        par::for_each_chunk_mut(&mut out, f, |row, chunk| {
            // Output row index enumerates (bi, ti, ci).
            let (bt, ci) = (row / c, row % c);
            let (bi, ti) = (bt / t, bt % t);
            let src = &vx[((bi * c + ci) * t + ti) * f..][..f];
            chunk.copy_from_slice(src);
        });
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![b * t, c * f], out),
            req,
            Op::FlattenCf { x },
        ))
    }

    /// Depthwise 1-D convolution along time: `x [b,t,c]`, `w [c,k]` with odd
    /// `k`, zero padding keeping the length.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let ok = sx.len() == 3
            && sw.len() == 2
            && sx[2] == sw[0]
            && sw[1] % 2 == 1
            && self.shape(bias) == [sx[2]];
        if !ok {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("x {sx:?}, w {sw:?}, bias {:?}", self.shape(bias)),
            ));
        }
        let (b, t, c) = (sx[0], sx[1], sx[2]);
        let k = sw[1];
        let pad = (k / 2) as isize;
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let vb = self.value(bias).data();
        let mut out = vec![T::zero(); b * t * c];
        par::for_each_chunk_mut(&mut out, c, |row, chunk| {
            let (bi, ti) = (row / t, row % t);
            for (ci, o) in chunk.iter_mut().enumerate() {
                let mut acc = vb[ci];
                for ki in 0..k {
                    let tin = ti as isize + ki as isize - pad;
                    if tin < 0 || tin >= t as isize {
                        continue;
                    }
                    acc = acc + vx[(bi * t + tin as usize) * c + ci] * vw[ci * k + ki];
                }
                *o = acc;
            }
        });
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![b, t, c], out),
            req,
            Op::DepthwiseConv1d { x, w, bias },
        ))
    }

    /// Row lookup: `table [v,d]`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for table of {v} rows"),
            ));
        }
        let vt = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt[i as usize * d..(i as usize + 1) * d]);
        }
        let req = self.requires(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data),
            req,
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// Mean cross-entropy over the positions where `mask` is 1, from raw
    /// logits `[n,v]`. With an all-zero mask the loss is exactly zero and no
    /// gradient flows.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[u8],
    ) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {s:?} with {} targets, {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let (n, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} out of range for {v} classes"),
            ));
        }
        let vx = self.value(logits).data();
        let count = mask.iter().filter(|&&m| m != 0).count();
        let mut total = T::zero();
        if count > 0 {
            for i in 0..n {
                if mask[i] == 0 {
                    continue;
                }
                let row = &vx[i * v..(i + 1) * v];
                total = total + log_sum_exp(row) - row[targets[i] as usize];
            }
            total = total * T::from_f64(1.0 / count as f64);
        }
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(total),
            req,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }

    /// Inverted dropout. Identity when the tape is in inference mode or
    /// `p == 0`; otherwise zeroes elements with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut DetRng) -> NodeId {
        if !self.training || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep_scale })
            .collect();
        let data: Vec<T> = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data);
        let req = self.requires(x);
        self.push(value, req, Op::Dropout { x, mask })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut total = T::zero();
        for &v in self.value(x).data() {
            total = total + v;
        }
        let req = self.requires(x);
        self.push(Tensor::scalar(total), req, Op::SumAll { x })
    }

    // ------------------------------------------------------------ backward

    /// Backpropagate from a scalar node, filling `grad` on every node that
    /// requires it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0 as usize] =
            Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()]));
        for idx in (0..=loss.0 as usize).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_one(idx, &g, &mut grads);
                self.nodes[idx].grad = Some(g);
            }
        }
        Ok(())
    }

    fn push_grad(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0 as usize] {
            Some(t) => t.accumulate(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_one(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.push_grad(grads, *a, g.clone());
                self.push_grad(grads, *b, g.clone());
            }
            Op::AddBias { x, bias } => {
                self.push_grad(grads, *x, g.clone());
                if self.requires(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); n];
                    for (i, &v) in g.data().iter().enumerate() {
                        db[i % n] = db[i % n] + v;
                    }
                    self.push_grad(grads, *bias, Tensor::new(vec![n], db));
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let vb = self.value(*b);
                    let data = par::map_range(g.numel(), |i| g.data()[i] * vb.data()[i]);
                    self.push_grad(grads, *a, Tensor::new(vb.shape().to_vec(), data));
                }
                if self.requires(*b) {
                    let va = self.value(*a);
                    let data = par::map_range(g.numel(), |i| g.data()[i] * va.data()[i]);
                    self.push_grad(grads, *b, Tensor::new(va.shape().to_vec(), data));
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.push_grad(grads, *x, g.map(|v| v * c));
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    // dA = dY B^T
                    let da = mm_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.push_grad(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.requires(*b) {
                    // dB = A^T dY
                    let db = mm_tn(self.value(*a).data(), g.data(), m, k, n);
                    self.push_grad(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::MatmulTb { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.requires(*a) {
                    // dA = dY B
                    let da = mm_nn(g.data(), self.value(*b).data(), m, n, k);
                    self.push_grad(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.requires(*b) {
                    // dB = dY^T A
                    let db = mm_tn(g.data(), self.value(*a).data(), m, n, k);
                    self.push_grad(grads, *b, Tensor::new(vec![n, k], db));
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    par::for_each_chunk_mut(&mut da, k, |row, chunk| {
                        let (gi, mi) = (row / m, row % m);
                        let gr_row = &g.data()[(gi * m + mi) * n..(gi * m + mi + 1) * n];
                        let bb = &vb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // dA = dY B ([m,n][n,k])
                            for ni in 0..n {
                                let gv = gr_row[ni];
                                let br = &bb[ni * k..(ni + 1) * k];
                                for (o, &bv) in chunk.iter_mut().zip(br) {
                                    *o = *o + gv * bv;
                                }
                            }
                        } else {
                            // dA = dY B^T ([m,n][k,n]^T)
                            for (ki, o) in chunk.iter_mut().enumerate() {
                                let mut acc = T::zero();
                                for ni in 0..n {
                                    acc = acc + gr_row[ni] * bb[ki * n + ni];
                                }
                                *o = acc;
                            }
                        }
                    });
                    self.push_grad(grads, *a, Tensor::new(sa.to_vec(), da));
                }
                if self.requires(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    // Per-group accumulation over m: parallelize over groups.
                    par::for_each_chunk_mut(&mut db, sb[1] * sb[2], |gi, chunk| {
                        let ab = &va[gi * m * k..(gi + 1) * m * k];
                        let gb = &g.data()[gi * m * n..(gi + 1) * m * n];
                        if *trans_b {
                            // dB = dY^T A ([n,m][m,k]) in [n,k] layout
                            for mi in 0..m {
                                let ar = &ab[mi * k..(mi + 1) * k];
                                let grow = &gb[mi * n..(mi + 1) * n];
                                for ni in 0..n {
                                    let gv = grow[ni];
                                    let dst = &mut chunk[ni * k..(ni + 1) * k];
                                    for (o, &av) in dst.iter_mut().zip(ar) {
                                        *o = *o + gv * av;
                                    }
                                }
                            }
                        } else {
                            // dB = A^T dY ([k,m][m,n]) in [k,n] layout
                            for mi in 0..m {
                                let ar = &ab[mi * k..(mi + 1) * k];
                                let grow = &gb[mi * n..(mi + 1) * n];
                                for ki in 0..k {
                                    let av = ar[ki];
                                    let dst = &mut chunk[ki * n..(ki + 1) * n];
                                    for (o, &gv) in dst.iter_mut().zip(grow) {
                                        *o = *o + av * gv;
                                    }
                                }
                            }
                        }
                    });
                    self.push_grad(grads, *b, Tensor::new(sb.to_vec(), db));
                }
            }
            Op::RelScores { qv, rproj } => {
                let (sq, sr) = (self.shape(*qv), self.shape(*rproj));
                let (gg, t, dk) = (sq[0], sq[1], sq[2]);
                let (h, l) = (sr[0], sr[1]);
                let (vq, vr) = (self.value(*qv).data(), self.value(*rproj).data());
                if self.requires(*qv) {
                    let mut dq = vec![T::zero(); vq.len()];
                    par::for_each_chunk_mut(&mut dq, dk, |row, chunk| {
                        let (gi, ti) = (row / t, row % t);
                        let grow = &g.data()[(gi * t + ti) * l..(gi * t + ti + 1) * l];
                        let rh = &vr[(gi % h) * l * dk..((gi % h) + 1) * l * dk];
                        for li in 0..l {
                            let gv = grow[li];
                            let r = &rh[li * dk..(li + 1) * dk];
                            for (o, &rv) in chunk.iter_mut().zip(r) {
                                *o = *o + gv * rv;
                            }
                        }
                    });
                    self.push_grad(grads, *qv, Tensor::new(sq.to_vec(), dq));
                }
                if self.requires(*rproj) {
                    let mut dr = vec![T::zero(); vr.len()];
                    // Groups sharing a head write to the same rows; keep this
                    // accumulation sequential for determinism.
                    for gi in 0..gg {
                        let hi = gi % h;
                        for ti in 0..t {
                            let grow = &g.data()[(gi * t + ti) * l..(gi * t + ti + 1) * l];
                            let q = &vq[(gi * t + ti) * dk..(gi * t + ti + 1) * dk];
                            for li in 0..l {
                                let gv = grow[li];
                                let dst = &mut dr[(hi * l + li) * dk..(hi * l + li + 1) * dk];
                                for (o, &qv_) in dst.iter_mut().zip(q) {
                                    *o = *o + gv * qv_;
                                }
                            }
                        }
                    }
                    self.push_grad(grads, *rproj, Tensor::new(sr.to_vec(), dr));
                }
            }
            Op::RelSelect { x, t_keys, max_dist } => {
                let sx = self.shape(*x);
                let (gg, t, l) = (sx[0], sx[1], sx[2]);
                let m = *max_dist as isize;
                let mut dx = vec![T::zero(); gg * t * l];
                // Different keys can clamp to the same position, so scatter
                // sequentially per row.
                par::for_each_chunk_mut(&mut dx, l, |row, chunk| {
                    let grow = &g.data()[row * t_keys..(row + 1) * t_keys];
                    let ti = row % t;
                    for (j, &gv) in grow.iter().enumerate() {
                        let d = (ti as isize - j as isize).clamp(-m, m) + m;
                        chunk[d as usize] = chunk[d as usize] + gv;
                    }
                });
                self.push_grad(grads, *x, Tensor::new(sx.to_vec(), dx));
            }
            Op::Reshape { x } => {
                let delta = Tensor::new(self.shape(*x).to_vec(), g.data().to_vec());
                self.push_grad(grads, *x, delta);
            }
            Op::ConcatRows { xs } => {
                let d = self.shape(*xs.first().unwrap())[1];
                let mut start = 0usize;
                for &x in xs {
                    let rows = self.shape(x)[0];
                    if self.requires(x) {
                        let data = g.data()[start * d..(start + rows) * d].to_vec();
                        self.push_grad(grads, x, Tensor::new(vec![rows, d], data));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let d = s[1];
                let mut dx = vec![T::zero(); s[0] * d];
                dx[start * d..start * d + g.numel()].copy_from_slice(g.data());
                self.push_grad(grads, *x, Tensor::new(s.to_vec(), dx));
            }
            Op::SplitHeads { x, b, t, h, dk } => {
                let (b, t, h, dk) = (*b, *t, *h, *dk);
                let mut dx = vec![T::zero(); b * t * h * dk];
                par::for_each_chunk_mut(&mut dx, dk, |row, chunk| {
                    // Input rows enumerate (bi, ti, hi).
                    let (bt, hi) = (row / h, row % h);
                    let (bi, ti) = (bt / t, bt % t);
                    let src = &g.data()[((bi * h + hi) * t + ti) * dk..][..dk];
                    chunk.copy_from_slice(src);
                });
                self.push_grad(grads, *x, Tensor::new(vec![b * t, h * dk], dx));
            }
            Op::MergeHeads { x, b, t, h, dk } => {
                let (b, t, h, dk) = (*b, *t, *h, *dk);
                let mut dx = vec![T::zero(); b * h * t * dk];
                par::for_each_chunk_mut(&mut dx, dk, |row, chunk| {
                    let (bh, ti) = (row / t, row % t);
                    let (bi, hi) = (bh / h, bh % h);
                    let src = &g.data()[(bi * t + ti) * (h * dk) + hi * dk..][..dk];
                    chunk.copy_from_slice(src);
                });
                self.push_grad(grads, *x, Tensor::new(vec![b * h, t, dk], dx));
            }
            Op::Softmax { x } => {
                let y = &self.nodes[idx].value;
                let n = y.shape().last().copied().unwrap();
                let mut dx = vec![T::zero(); y.numel()];
                par::for_each_chunk_mut(&mut dx, n, |row, chunk| {
                    let yr = &y.data()[row * n..(row + 1) * n];
                    let gr = &g.data()[row * n..(row + 1) * n];
                    let mut dot = T::zero();
                    for i in 0..n {
                        dot = dot + yr[i] * gr[i];
                    }
                    for i in 0..n {
                        chunk[i] = yr[i] * (gr[i] - dot);
                    }
                });
                self.push_grad(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::LogSoftmax { x } => {
                let y = &self.nodes[idx].value;
                let n = y.shape().last().copied().unwrap();
                let mut dx = vec![T::zero(); y.numel()];
                par::for_each_chunk_mut(&mut dx, n, |row, chunk| {
                    let yr = &y.data()[row * n..(row + 1) * n];
                    let gr = &g.data()[row * n..(row + 1) * n];
                    let mut gsum = T::zero();
                    for &gv in gr {
                        gsum = gsum + gv;
                    }
                    for i in 0..n {
                        chunk[i] = gr[i] - yr[i].exp() * gsum;
                    }
                });
                self.push_grad(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::Relu { x } => {
                let vx = self.value(*x);
                let data = par::map_range(g.numel(), |i| {
                    if vx.data()[i] > T::zero() { g.data()[i] } else { T::zero() }
                });
                self.push_grad(grads, *x, Tensor::new(vx.shape().to_vec(), data));
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                let data = par::map_range(g.numel(), |i| {
                    let s = y.data()[i];
                    g.data()[i] * s * (T::one() - s)
                });
                self.push_grad(grads, *x, Tensor::new(y.shape().to_vec(), data));
            }
            Op::Swish { x } => {
                let vx = self.value(*x);
                let data = par::map_range(g.numel(), |i| {
                    let v = vx.data()[i];
                    let s = sigmoid_scalar(v);
                    g.data()[i] * (s + v * s * (T::one() - s))
                });
                self.push_grad(grads, *x, Tensor::new(vx.shape().to_vec(), data));
            }
            Op::Glu { x } => {
                let vx = self.value(*x);
                let n = vx.shape().last().copied().unwrap();
                let half = n / 2;
                let mut dx = vec![T::zero(); vx.numel()];
                par::for_each_chunk_mut(&mut dx, n, |row, chunk| {
                    let src = &vx.data()[row * n..(row + 1) * n];
                    let gr = &g.data()[row * half..(row + 1) * half];
                    for i in 0..half {
                        let s = sigmoid_scalar(src[half + i]);
                        chunk[i] = gr[i] * s;
                        chunk[half + i] = gr[i] * src[i] * s * (T::one() - s);
                    }
                });
                self.push_grad(grads, *x, Tensor::new(vx.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let vx = self.value(*x);
                let n = vx.shape().last().copied().unwrap();
                let rows = vx.numel() / n;
                let vg = self.value(*gamma).data();
                let inv_n = T::from_f64(1.0 / n as f64);
                if self.requires(*x) {
                    let mut dx = vec![T::zero(); vx.numel()];
                    par::for_each_chunk_mut(&mut dx, n, |row, chunk| {
                        let src = &vx.data()[row * n..(row + 1) * n];
                        let gr = &g.data()[row * n..(row + 1) * n];
                        let (m, rs) = (stats.mean[row], stats.rstd[row]);
                        // dL/dxhat_i = g_i * gamma_i; with xhat = (x-m)*rs:
                        // dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..n {
                            let dxh = gr[i] * vg[i];
                            let xh = (src[i] - m) * rs;
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xh;
                        }
                        s1 = s1 * inv_n;
                        s2 = s2 * inv_n;
                        for i in 0..n {
                            let dxh = gr[i] * vg[i];
                            let xh = (src[i] - m) * rs;
                            chunk[i] = rs * (dxh - s1 - xh * s2);
                        }
                    });
                    self.push_grad(grads, *x, Tensor::new(vx.shape().to_vec(), dx));
                }
                if self.requires(*gamma) || self.requires(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for row in 0..rows {
                        let src = &vx.data()[row * n..(row + 1) * n];
                        let gr = &g.data()[row * n..(row + 1) * n];
                        let (m, rs) = (stats.mean[row], stats.rstd[row]);
                        for i in 0..n {
                            let xh = (src[i] - m) * rs;
                            dg[i] = dg[i] + gr[i] * xh;
                            db[i] = db[i] + gr[i];
                        }
                    }
                    self.push_grad(grads, *gamma, Tensor::new(vec![n], dg));
                    self.push_grad(grads, *beta, Tensor::new(vec![n], db));
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, ci, t, f) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let to = (t + 2 * pad - kh) / stride + 1;
                let fo = (f + 2 * pad - kw) / stride + 1;
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                if self.requires(*x) {
                    let mut dx = vec![T::zero(); vx.len()];
                    // Each (bi, cii) input plane gathers from all output
                    // channels; planes are independent.
                    par::for_each_chunk_mut(&mut dx, t * f, |plane, chunk| {
                        let (bi, cii) = (plane / ci, plane % ci);
                        for coi in 0..co {
                            let gplane =
                                &g.data()[(bi * co + coi) * to * fo..(bi * co + coi + 1) * to * fo];
                            for ti in 0..to {
                                for fi in 0..fo {
                                    let gv = gplane[ti * fo + fi];
                                    for khi in 0..kh {
                                        let tin =
                                            (ti * stride + khi) as isize - *pad as isize;
                                        if tin < 0 || tin >= t as isize {
                                            continue;
                                        }
                                        for kwi in 0..kw {
                                            let fin =
                                                (fi * stride + kwi) as isize - *pad as isize;
                                            if fin < 0 || fin >= f as isize {
                                                continue;
                                            }
                                            let wi = ((coi * ci + cii) * kh + khi) * kw + kwi;
                                            let di = tin as usize * f + fin as usize;
                                            chunk[di] = chunk[di] + gv * vw[wi];
                                        }
                                    }
                                }
                            }
                        }
                    });
                    self.push_grad(grads, *x, Tensor::new(sx.to_vec(), dx));
                }
                if self.requires(*w) {
                    let mut dw = vec![T::zero(); vw.len()];
                    // Weight gradients accumulate over the batch; iterate
                    // batch sequentially, filters in parallel.
                    par::for_each_chunk_mut(&mut dw, ci * kh * kw, |coi, chunk| {
                        for bi in 0..b {
                            let gplane =
                                &g.data()[(bi * co + coi) * to * fo..(bi * co + coi + 1) * to * fo];
                            for ti in 0..to {
                                for fi in 0..fo {
                                    let gv = gplane[ti * fo + fi];
                                    for cii in 0..ci {
                                        for khi in 0..kh {
                                            let tin =
                                                (ti * stride + khi) as isize - *pad as isize;
                                            if tin < 0 || tin >= t as isize {
                                                continue;
                                            }
                                            for kwi in 0..kw {
                                                let fin = (fi * stride + kwi) as isize
                                                    - *pad as isize;
                                                if fin < 0 || fin >= f as isize {
                                                    continue;
                                                }
                                                let xi = ((bi * ci + cii) * t + tin as usize) * f
                                                    + fin as usize;
                                                let di = (cii * kh + khi) * kw + kwi;
                                                chunk[di] = chunk[di] + gv * vx[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    self.push_grad(grads, *w, Tensor::new(sw.to_vec(), dw));
                }
                if self.requires(*bias) {
                    let mut db = vec![T::zero(); co];
                    for bi in 0..b {
                        for coi in 0..co {
                            let gplane =
                                &g.data()[(bi * co + coi) * to * fo..(bi * co + coi + 1) * to * fo];
                            for &gv in gplane {
                                db[coi] = db[coi] + gv;
                            }
                        }
                    }
                    self.push_grad(grads, *bias, Tensor::new(vec![co], db));
                }
            }
            Op::FlattenCf { x } => {
                let s = self.shape(*x);
                let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); b * c * t * f];
                par::for_each_chunk_mut(&mut dx, f, |row, chunk| {
                    // Input rows enumerate (bi, ci, ti).
                    let (bc, ti) = (row / t, row % t);
                    let (bi, ci_) = (bc / c, bc % c);
                    let src = &g.data()[((bi * t + ti) * c + ci_) * f..][..f];
                    chunk.copy_from_slice(src);
                });
                self.push_grad(grads, *x, Tensor::new(s.to_vec(), dx));
            }
            Op::DepthwiseConv1d { x, w, bias } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, t, c) = (sx[0], sx[1], sx[2]);
                let k = sw[1];
                let pad = (k / 2) as isize;
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                if self.requires(*x) {
                    let mut dx = vec![T::zero(); vx.len()];
                    par::for_each_chunk_mut(&mut dx, c, |row, chunk| {
                        let (bi, ti) = (row / t, row % t);
                        for (ci, o) in chunk.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            // Output positions touching input ti: tout = ti - ki + pad.
                            for ki in 0..k {
                                let tout = ti as isize - ki as isize + pad;
                                if tout < 0 || tout >= t as isize {
                                    continue;
                                }
                                acc = acc
                                    + g.data()[(bi * t + tout as usize) * c + ci] * vw[ci * k + ki];
                            }
                            *o = acc;
                        }
                    });
                    self.push_grad(grads, *x, Tensor::new(sx.to_vec(), dx));
                }
                if self.requires(*w) {
                    let mut dw = vec![T::zero(); vw.len()];
                    par::for_each_chunk_mut(&mut dw, k, |ci, chunk| {
                        for bi in 0..b {
                            for ti in 0..t {
                                let gv = g.data()[(bi * t + ti) * c + ci];
                                for (ki, o) in chunk.iter_mut().enumerate() {
                                    let tin = ti as isize + ki as isize - pad;
                                    if tin < 0 || tin >= t as isize {
                                        continue;
                                    }
                                    *o = *o + gv * vx[(bi * t + tin as usize) * c + ci];
                                }
                            }
                        }
                    });
                    self.push_grad(grads, *w, Tensor::new(sw.to_vec(), dw));
                }
                if self.requires(*bias) {
                    let mut db = vec![T::zero(); c];
                    for (i, &gv) in g.data().iter().enumerate() {
                        db[i % c] = db[i % c] + gv;
                    }
                    self.push_grad(grads, *bias, Tensor::new(vec![c], db));
                }
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![T::zero(); s[0] * d];
                // Repeated ids accumulate into the same row; scatter
                // sequentially.
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    let src = &g.data()[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                self.push_grad(grads, *table, Tensor::new(s.to_vec(), dt));
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let s = self.shape(*logits);
                let (n, v) = (s[0], s[1]);
                let count = mask.iter().filter(|&&m| m != 0).count();
                let mut dx = vec![T::zero(); n * v];
                if count > 0 {
                    let seed = g.data()[0] * T::from_f64(1.0 / count as f64);
                    let vx = self.value(*logits).data();
                    par::for_each_chunk_mut(&mut dx, v, |row, chunk| {
                        if mask[row] == 0 {
                            return;
                        }
                        softmax_row(&vx[row * v..(row + 1) * v], chunk);
                        for o in chunk.iter_mut() {
                            *o = *o * seed;
                        }
                        let t = targets[row] as usize;
                        chunk[t] = chunk[t] - seed;
                    });
                }
                self.push_grad(grads, *logits, Tensor::new(s.to_vec(), dx));
            }
            Op::Dropout { x, mask } => {
                let data = par::map_range(g.numel(), |i| g.data()[i] * mask[i]);
                self.push_grad(grads, *x, Tensor::new(g.shape().to_vec(), data));
            }
            Op::SumAll { x } => {
                let gv = g.data()[0];
                let vx = self.value(*x);
                self.push_grad(grads, *x, Tensor::filled(vx.shape(), gv));
            }
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Evaluate through exp of a non-positive argument on both branches to
    // avoid overflow for large |v|.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut mx = row[0];
    for &v in &row[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut s = T::zero();
    for &v in row {
        s = s + (v - mx).exp();
    }
    mx + s.ln()
}

fn softmax_row<T: Scalar>(src: &[T], out: &mut [T]) {
    let mut mx = src[0];
    for &v in &src[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(src) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// `a [m,k] x b [k,n]`, both row-major.
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, |mi, row| {
        let ar = &a[mi * k..(mi + 1) * k];
        for (ki, &av) in ar.iter().enumerate() {
            let br = &b[ki * n..(ki + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `a [m,k] x b[n,k]^T`.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, |mi, row| {
        let ar = &a[mi * k..(mi + 1) * k];
        for (ni, o) in row.iter_mut().enumerate() {
            let br = &b[ni * k..(ni + 1) * k];
            let mut acc = T::zero();
            for ki in 0..k {
                acc = acc + ar[ki] * br[ki];
            }
            *o = acc;
        }
    });
    out
}

/// `a [m,k]^T x b [m,n]` giving `[k,n]`.
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    par::for_each_chunk_mut(&mut out, n, |ki, row| {
        for mi in 0..m {
            let av = a[mi * k + ki];
            let br = &b[mi * n..(mi + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// Sequential reference matmul used by the benchmark suite for comparison.
pub fn mm_nn_seq<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for mi in 0..m {
        let ar = &a[mi * k..(mi + 1) * k];
        let row = &mut out[mi * n..(mi + 1) * n];
        for (ki, &av) in ar.iter().enumerate() {
            let br = &b[ki * n..(ki + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    }
    out
}
