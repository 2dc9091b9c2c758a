//! Multi-head attention shared by the encoder, the AED decoder, and the
//! stand-in LM: content-only scoring with optional Transformer-XL-style
//! relative positions and optional LoRA deltas on the query/value
//! projections.

use crate::rng::DetRng;
use crate::tensor::{mm_nn, NodeId, Param, ParamSet, Scalar, Tape, Tensor};
use crate::Result;

use super::{
    init_xavier, sinusoid_rows, weight_param, zero_param, LoraConfig, NEG_INF_MASK,
};

/// Trainable low-rank delta `scaling · B·A` on top of a frozen or shared base
/// projection. `a` is `[rank, d_in]` (random init), `b` is `[d_out, rank]`
/// (zero init), so the delta starts at exactly zero.
#[derive(Debug, Clone)]
pub struct LoraPair<T: Scalar> {
    pub a: Param<T>,
    pub b: Param<T>,
    pub scaling: f64,
}

impl<T: Scalar> LoraPair<T> {
    pub fn new(seed: u64, name: &str, d_out: usize, d_in: usize, cfg: &LoraConfig) -> Self {
        let a_name = format!("{name}.a");
        let mut rng = DetRng::for_purpose(seed, &format!("init/{a_name}"), 0);
        Self {
            a: Param::new(a_name.clone(), init_xavier(&mut rng, &[cfg.rank, d_in], d_in, cfg.rank)),
            b: zero_param(&format!("{name}.b"), &[d_out, cfg.rank]),
            scaling: cfg.scaling(),
        }
    }

    /// `base + scaling · (x Aᵀ) Bᵀ` for `x [n, d_in]`.
    pub fn apply(&self, tape: &mut Tape<T>, x: NodeId, base: NodeId) -> Result<NodeId> {
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let xa = tape.matmul_tb(x, a)?;
        let xab = tape.matmul_tb(xa, b)?;
        let scaled = tape.scale(xab, self.scaling);
        tape.add(base, scaled)
    }

    /// The equivalent dense weight `w + scaling · B·A`, for merged inference.
    pub fn merged_weight(&self, w: &Tensor<T>) -> Tensor<T> {
        let (d_out, rank) = (self.b.value.shape()[0], self.b.value.shape()[1]);
        let d_in = self.a.value.shape()[1];
        let delta = mm_nn(self.b.value.data(), self.a.value.data(), d_out, rank, d_in);
        let scale = T::from_f64(self.scaling);
        let mut data = w.data().to_vec();
        for (o, d) in data.iter_mut().zip(&delta) {
            *o = *o + *d * scale;
        }
        Tensor::new(w.shape().to_vec(), data)
    }
}

impl<T: Scalar> ParamSet<T> for LoraPair<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.a);
        f(&self.b);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.a);
        f(&mut self.b);
    }
}

/// Parameters for relative-position scoring: the position projection `wr`
/// and the two per-head content/position biases, stored flat as `[d_model]`.
#[derive(Debug, Clone)]
pub struct RelPosParams<T: Scalar> {
    pub wr: Param<T>,
    pub u: Param<T>,
    pub v: Param<T>,
    pub max_dist: usize,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub num_heads: usize,
    pub wq: Param<T>,
    pub bq: Param<T>,
    pub wk: Param<T>,
    pub bk: Param<T>,
    pub wv: Param<T>,
    pub bv: Param<T>,
    pub wo: Param<T>,
    pub bo: Param<T>,
    pub rel: Option<RelPosParams<T>>,
    pub lora_q: Option<LoraPair<T>>,
    pub lora_v: Option<LoraPair<T>>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(seed: u64, name: &str, d_model: usize, num_heads: usize) -> Self {
        assert!(num_heads > 0 && d_model % num_heads == 0);
        Self {
            num_heads,
            wq: weight_param(seed, &format!("{name}.wq.w"), d_model, d_model),
            bq: zero_param(&format!("{name}.wq.b"), &[d_model]),
            wk: weight_param(seed, &format!("{name}.wk.w"), d_model, d_model),
            bk: zero_param(&format!("{name}.wk.b"), &[d_model]),
            wv: weight_param(seed, &format!("{name}.wv.w"), d_model, d_model),
            bv: zero_param(&format!("{name}.wv.b"), &[d_model]),
            wo: weight_param(seed, &format!("{name}.wo.w"), d_model, d_model),
            bo: zero_param(&format!("{name}.wo.b"), &[d_model]),
            rel: None,
            lora_q: None,
            lora_v: None,
        }
    }

    /// Enable Transformer-XL relative-position scoring (encoder self-attention).
    pub fn with_relative_positions(mut self, seed: u64, name: &str, max_dist: usize) -> Self {
        let d_model = self.wq.value.shape()[0];
        self.rel = Some(RelPosParams {
            wr: weight_param(seed, &format!("{name}.rel.wr"), d_model, d_model),
            u: zero_param(&format!("{name}.rel.u"), &[d_model]),
            v: zero_param(&format!("{name}.rel.v"), &[d_model]),
            max_dist,
        });
        self
    }

    /// Attach LoRA deltas to the query and value projections.
    pub fn with_lora(mut self, seed: u64, name: &str, cfg: &LoraConfig) -> Self {
        let d_model = self.wq.value.shape()[0];
        self.lora_q = Some(LoraPair::new(seed, &format!("{name}.lora_q"), d_model, d_model, cfg));
        self.lora_v = Some(LoraPair::new(seed, &format!("{name}.lora_v"), d_model, d_model, cfg));
        self
    }

    /// Freeze the base projections (LoRA pairs, if any, stay trainable).
    pub fn freeze_base(&mut self) {
        for p in [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
        ] {
            p.set_trainable(false);
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.value.shape()[0] / self.num_heads
    }

    /// Attention over `queries [b*tq, d]` against `keys_values [b*tk, d]`.
    /// `mask`, when present, is an additive `[b*h, tq, tk]` constant.
    /// Relative-position scoring requires `tq == tk` (self-attention).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        queries: NodeId,
        keys_values: NodeId,
        b: usize,
        tq: usize,
        tk: usize,
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let h = self.num_heads;
        let dk = self.head_dim();

        let (wq, bq) = (tape.param(&self.wq), tape.param(&self.bq));
        let (wk, bk) = (tape.param(&self.wk), tape.param(&self.bk));
        let (wv, bv) = (tape.param(&self.wv), tape.param(&self.bv));
        let mut q = tape.linear(queries, wq, Some(bq))?;
        if let Some(lora) = &self.lora_q {
            q = lora.apply(tape, queries, q)?;
        }
        let k = tape.linear(keys_values, wk, Some(bk))?;
        let mut v = tape.linear(keys_values, wv, Some(bv))?;
        if let Some(lora) = &self.lora_v {
            v = lora.apply(tape, keys_values, v)?;
        }
        let kh = tape.split_heads(k, b, tk, h)?;
        let vh = tape.split_heads(v, b, tk, h)?;

        let mut scores = match &self.rel {
            None => {
                let qh = tape.split_heads(q, b, tq, h)?;
                tape.batch_matmul(qh, kh, true)?
            }
            Some(rel) => {
                if tq != tk {
                    return Err(crate::Error::shape(
                        "attention",
                        format!("relative positions need tq == tk, got {tq} vs {tk}"),
                    ));
                }
                let u = tape.param(&rel.u);
                let v_bias = tape.param(&rel.v);
                let qu = tape.add_bias(q, u)?;
                let qv = tape.add_bias(q, v_bias)?;
                let quh = tape.split_heads(qu, b, tq, h)?;
                let qvh = tape.split_heads(qv, b, tq, h)?;
                let content = tape.batch_matmul(quh, kh, true)?;

                let m = rel.max_dist;
                let table =
                    sinusoid_rows((0..2 * m + 1).map(|i| i as f64 - m as f64), h * dk);
                let table = tape.constant(table);
                let wr = tape.param(&rel.wr);
                let rproj = tape.matmul_tb(table, wr)?;
                let rproj_h = tape.split_heads(rproj, 1, 2 * m + 1, h)?;
                let pos_by_offset = tape.rel_scores(qvh, rproj_h)?;
                let pos = tape.rel_select(pos_by_offset, tk, m)?;
                tape.add(content, pos)?
            }
        };
        scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        if let Some(mask) = mask {
            scores = tape.add(scores, mask)?;
        }
        let attn = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(attn, vh, false)?;
        let merged = tape.merge_heads(ctx, b, h)?;
        let (wo, bo) = (tape.param(&self.wo), tape.param(&self.bo));
        tape.linear(merged, wo, Some(bo))
    }
}

impl<T: Scalar> ParamSet<T> for MultiHeadAttention<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo] {
            f(p);
        }
        if let Some(rel) = &self.rel {
            f(&rel.wr);
            f(&rel.u);
            f(&rel.v);
        }
        if let Some(l) = &self.lora_q {
            l.for_each_param(f);
        }
        if let Some(l) = &self.lora_v {
            l.for_each_param(f);
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
        ] {
            f(p);
        }
        if let Some(rel) = &mut self.rel {
            f(&mut rel.wr);
            f(&mut rel.u);
            f(&mut rel.v);
        }
        if let Some(l) = &mut self.lora_q {
            l.visit_params(f);
        }
        if let Some(l) = &mut self.lora_v {
            l.visit_params(f);
        }
    }
}

/// Additive key-padding mask `[b*h, tq, tk]`: zero where the key position is
/// within the batch element's valid length, strongly negative elsewhere.
pub fn key_padding_mask<T: Scalar>(
    b: usize,
    h: usize,
    tq: usize,
    tk: usize,
    valid_k: &[usize],
) -> Tensor<T> {
    assert_eq!(valid_k.len(), b);
    Tensor::from_fn(&[b * h, tq, tk], |i| {
        let j = i % tk;
        let bi = i / (tq * tk) / h;
        if j < valid_k[bi] {
            T::zero()
        } else {
            T::from_f64(NEG_INF_MASK)
        }
    })
}

/// Additive causal mask `[b*h, t, t]`: zero at or before the diagonal.
pub fn causal_mask<T: Scalar>(b: usize, h: usize, t: usize) -> Tensor<T> {
    Tensor::from_fn(&[b * h, t, t], |i| {
        let j = i % t;
        let q = (i / t) % t;
        if j <= q {
            T::zero()
        } else {
            T::from_f64(NEG_INF_MASK)
        }
    })
}

/// Causal and key-padding constraints combined in one additive mask.
pub fn causal_padding_mask<T: Scalar>(
    b: usize,
    h: usize,
    t: usize,
    valid: &[usize],
) -> Tensor<T> {
    assert_eq!(valid.len(), b);
    Tensor::from_fn(&[b * h, t, t], |i| {
        let j = i % t;
        let q = (i / t) % t;
        let bi = i / (t * t) / h;
        if j <= q && j < valid[bi] {
            T::zero()
        } else {
            T::from_f64(NEG_INF_MASK)
        }
    })
}
