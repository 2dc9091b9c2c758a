//! Conformer acoustic encoder: two-layer convolutional subsampling
//! (10 ms → 40 ms frames) followed by a stack of Conformer blocks with
//! macaron feed-forwards, relative-position self-attention, and a
//! depthwise-convolution module.

use crate::rng::DetRng;
use crate::tensor::{NodeId, Param, ParamSet, Scalar, Tape, Tensor};
use crate::Result;

use super::attention::{key_padding_mask, MultiHeadAttention};
use super::{ones_param, weight_param, zero_param, EncoderConfig};

/// Inner activation of a feed-forward sublayer: Swish in Conformer blocks,
/// ReLU in plain Transformer layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnActivation {
    Swish,
    Relu,
}

/// One feed-forward sublayer: `Linear(d → e·d) → activation → Linear(e·d → d)`.
#[derive(Debug, Clone)]
pub struct FeedForward<T: Scalar> {
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
    pub act: FfnActivation,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(seed: u64, name: &str, d: usize, expansion: usize, act: FfnActivation) -> Self {
        Self {
            w1: weight_param(seed, &format!("{name}.w1"), expansion * d, d),
            b1: zero_param(&format!("{name}.b1"), &[expansion * d]),
            w2: weight_param(seed, &format!("{name}.w2"), d, expansion * d),
            b2: zero_param(&format!("{name}.b2"), &[d]),
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let (w1, b1) = (tape.param(&self.w1), tape.param(&self.b1));
        let (w2, b2) = (tape.param(&self.w2), tape.param(&self.b2));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = match self.act {
            FfnActivation::Swish => tape.swish(h),
            FfnActivation::Relu => tape.relu(h),
        };
        tape.linear(h, w2, Some(b2))
    }
}

impl<T: Scalar> ParamSet<T> for FeedForward<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in [&self.w1, &self.b1, &self.w2, &self.b2] {
            f(p);
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            f(p);
        }
    }
}

/// Layer-norm gain/bias pair.
#[derive(Debug, Clone)]
pub struct Norm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: ones_param(&format!("{name}.gamma"), &[d]),
            beta: zero_param(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let (g, b) = (tape.param(&self.gamma), tape.param(&self.beta));
        tape.layer_norm(x, g, b)
    }
}

impl<T: Scalar> ParamSet<T> for Norm<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Convolution module: pointwise to `2d` → GLU → depthwise (kernel `k`) →
/// layer norm → Swish → pointwise back to `d`.
#[derive(Debug, Clone)]
pub struct ConvModule<T: Scalar> {
    pub pw1_w: Param<T>,
    pub pw1_b: Param<T>,
    pub dw_w: Param<T>,
    pub dw_b: Param<T>,
    pub norm: Norm<T>,
    pub pw2_w: Param<T>,
    pub pw2_b: Param<T>,
}

impl<T: Scalar> ConvModule<T> {
    pub fn new(seed: u64, name: &str, d: usize, kernel: usize) -> Self {
        let mut rng = DetRng::for_purpose(seed, &format!("init/{name}.dw.w"), 0);
        let limit = (6.0 / (2 * kernel) as f64).sqrt();
        Self {
            pw1_w: weight_param(seed, &format!("{name}.pw1.w"), 2 * d, d),
            pw1_b: zero_param(&format!("{name}.pw1.b"), &[2 * d]),
            dw_w: Param::new(
                format!("{name}.dw.w"),
                Tensor::from_fn(&[d, kernel], |_| T::from_f64(rng.uniform_in(-limit, limit))),
            ),
            dw_b: zero_param(&format!("{name}.dw.b"), &[d]),
            norm: Norm::new(&format!("{name}.norm"), d),
            pw2_w: weight_param(seed, &format!("{name}.pw2.w"), d, d),
            pw2_b: zero_param(&format!("{name}.pw2.b"), &[d]),
        }
    }

    /// `x` is `[b*t, d]`; `time_mask`, when given, zeroes padded positions
    /// before the depthwise convolution so padding cannot leak across time.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        b: usize,
        t: usize,
        time_mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let d = self.pw2_w.value.shape()[0];
        let (w1, b1) = (tape.param(&self.pw1_w), tape.param(&self.pw1_b));
        let mut h = tape.linear(x, w1, Some(b1))?;
        h = tape.glu(h)?;
        if let Some(mask) = time_mask {
            h = tape.mul(h, mask)?;
        }
        let h3 = tape.reshape(h, vec![b, t, d])?;
        let (dw, db) = (tape.param(&self.dw_w), tape.param(&self.dw_b));
        let h3 = tape.depthwise_conv1d(h3, dw, db)?;
        let mut h = tape.reshape(h3, vec![b * t, d])?;
        h = self.norm.forward(tape, h)?;
        h = tape.swish(h);
        let (w2, b2) = (tape.param(&self.pw2_w), tape.param(&self.pw2_b));
        tape.linear(h, w2, Some(b2))
    }
}

impl<T: Scalar> ParamSet<T> for ConvModule<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.pw1_w);
        f(&self.pw1_b);
        f(&self.dw_w);
        f(&self.dw_b);
        self.norm.for_each_param(f);
        f(&self.pw2_w);
        f(&self.pw2_b);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.pw1_w);
        f(&mut self.pw1_b);
        f(&mut self.dw_w);
        f(&mut self.dw_b);
        self.norm.visit_params(f);
        f(&mut self.pw2_w);
        f(&mut self.pw2_b);
    }
}

/// One Conformer block, entirely pre-norm:
/// half-scaled FFN → self-attention → convolution → half-scaled FFN,
/// each wrapped in a residual, then a final layer norm.
#[derive(Debug, Clone)]
pub struct ConformerBlock<T: Scalar> {
    pub ln_ffn1: Norm<T>,
    pub ffn1: FeedForward<T>,
    pub ln_attn: Norm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln_conv: Norm<T>,
    pub conv: ConvModule<T>,
    pub ln_ffn2: Norm<T>,
    pub ffn2: FeedForward<T>,
    pub ln_out: Norm<T>,
}

impl<T: Scalar> ConformerBlock<T> {
    pub fn new(seed: u64, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln_ffn1: Norm::new(&format!("{name}.ln_ffn1"), d),
            ffn1: FeedForward::new(seed, &format!("{name}.ffn1"), d, cfg.ffn_expansion, FfnActivation::Swish),
            ln_attn: Norm::new(&format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(seed, &format!("{name}.attn"), d, cfg.num_heads)
                .with_relative_positions(
                    seed,
                    &format!("{name}.attn"),
                    cfg.max_relative_distance,
                ),
            ln_conv: Norm::new(&format!("{name}.ln_conv"), d),
            conv: ConvModule::new(seed, &format!("{name}.conv"), d, cfg.conv_kernel),
            ln_ffn2: Norm::new(&format!("{name}.ln_ffn2"), d),
            ffn2: FeedForward::new(seed, &format!("{name}.ffn2"), d, cfg.ffn_expansion, FfnActivation::Swish),
            ln_out: Norm::new(&format!("{name}.ln_out"), d),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        b: usize,
        t: usize,
        attn_mask: Option<NodeId>,
        time_mask: Option<NodeId>,
        dropout_p: f64,
        rng: &mut DetRng,
    ) -> Result<NodeId> {
        let mut x = x;

        let h = self.ln_ffn1.forward(tape, x)?;
        let h = self.ffn1.forward(tape, h)?;
        let h = tape.scale(h, 0.5);
        let h = tape.dropout(h, dropout_p, rng);
        x = tape.add(x, h)?;

        let h = self.ln_attn.forward(tape, x)?;
        let h = self.attn.forward(tape, h, h, b, t, t, attn_mask)?;
        let h = tape.dropout(h, dropout_p, rng);
        x = tape.add(x, h)?;

        let h = self.ln_conv.forward(tape, x)?;
        let h = self.conv.forward(tape, h, b, t, time_mask)?;
        let h = tape.dropout(h, dropout_p, rng);
        x = tape.add(x, h)?;

        let h = self.ln_ffn2.forward(tape, x)?;
        let h = self.ffn2.forward(tape, h)?;
        let h = tape.scale(h, 0.5);
        let h = tape.dropout(h, dropout_p, rng);
        x = tape.add(x, h)?;

        self.ln_out.forward(tape, x)
    }
}

impl<T: Scalar> ParamSet<T> for ConformerBlock<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln_ffn1.for_each_param(f);
        self.ffn1.for_each_param(f);
        self.ln_attn.for_each_param(f);
        self.attn.for_each_param(f);
        self.ln_conv.for_each_param(f);
        self.conv.for_each_param(f);
        self.ln_ffn2.for_each_param(f);
        self.ffn2.for_each_param(f);
        self.ln_out.for_each_param(f);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln_ffn1.visit_params(f);
        self.ffn1.visit_params(f);
        self.ln_attn.visit_params(f);
        self.attn.visit_params(f);
        self.ln_conv.visit_params(f);
        self.conv.visit_params(f);
        self.ln_ffn2.visit_params(f);
        self.ffn2.visit_params(f);
        self.ln_out.visit_params(f);
    }
}

/// Encoder output: hidden states flattened to `[b * t_out, d_model]` along
/// with the per-utterance valid lengths after subsampling.
pub struct EncodedBatch {
    pub hidden: NodeId,
    pub batch: usize,
    pub t_out: usize,
    pub valid: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ConformerEncoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub conv1_w: Param<T>,
    pub conv1_b: Param<T>,
    pub conv2_w: Param<T>,
    pub conv2_b: Param<T>,
    pub proj_w: Param<T>,
    pub proj_b: Param<T>,
    pub blocks: Vec<ConformerBlock<T>>,
}

impl<T: Scalar> ConformerEncoder<T> {
    pub fn new(seed: u64, cfg: &EncoderConfig) -> Self {
        let (c1, c2) = (cfg.conv1_channels(), cfg.conv2_channels());
        let proj_in = c2 * cfg.subsampled_mels();
        let mut rng1 = DetRng::for_purpose(seed, "init/encoder.conv1.w", 0);
        let mut rng2 = DetRng::for_purpose(seed, "init/encoder.conv2.w", 0);
        let lim1 = (6.0 / (9 + c1 * 9) as f64).sqrt();
        let lim2 = (6.0 / (c1 * 9 + c2 * 9) as f64).sqrt();
        let blocks = (0..cfg.num_layers)
            .map(|i| ConformerBlock::new(seed, &format!("encoder.block{i}"), cfg))
            .collect();
        Self {
            cfg: cfg.clone(),
            conv1_w: Param::new(
                "encoder.conv1.w",
                Tensor::from_fn(&[c1, 1, 3, 3], |_| T::from_f64(rng1.uniform_in(-lim1, lim1))),
            ),
            conv1_b: zero_param("encoder.conv1.b", &[c1]),
            conv2_w: Param::new(
                "encoder.conv2.w",
                Tensor::from_fn(&[c2, c1, 3, 3], |_| T::from_f64(rng2.uniform_in(-lim2, lim2))),
            ),
            conv2_b: zero_param("encoder.conv2.b", &[c2]),
            proj_w: weight_param(seed, "encoder.proj.w", cfg.d_model, proj_in),
            proj_b: zero_param("encoder.proj.b", &[cfg.d_model]),
            blocks,
        }
    }

    /// Zero/negative-infinity masks for a subsampled batch.
    fn masks(&self, b: usize, t: usize, valid: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let d = self.cfg.d_model;
        let time = Tensor::from_fn(&[b * t, d], |i| {
            let row = i / d;
            let (bi, ti) = (row / t, row % t);
            if ti < valid[bi] {
                T::one()
            } else {
                T::zero()
            }
        });
        let attn = key_padding_mask(b, self.cfg.num_heads, t, t, valid);
        (time, attn)
    }

    /// Zero out padded time positions of a `[b, c, t, f]` activation.
    fn mask_4d(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        shape: &[usize],
        valid: &[usize],
    ) -> Result<NodeId> {
        let (c, t, f) = (shape[1], shape[2], shape[3]);
        let mask = Tensor::from_fn(shape, |i| {
            let ti = (i / f) % t;
            let bi = i / (c * t * f);
            if ti < valid[bi] {
                T::one()
            } else {
                T::zero()
            }
        });
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }

    /// Encode a padded feature batch `[b, t_in, num_mels]` (flattened to
    /// `[b * t_in, num_mels]`) with per-utterance valid frame counts.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        features: NodeId,
        b: usize,
        t_in: usize,
        valid_frames: &[usize],
        rng: &mut DetRng,
    ) -> Result<EncodedBatch> {
        if valid_frames.len() != b || valid_frames.iter().any(|&v| v == 0 || v > t_in) {
            return Err(crate::Error::shape(
                "encoder",
                format!("valid frame counts {valid_frames:?} for batch {b} x {t_in}"),
            ));
        }
        let cfg = &self.cfg;
        let f_in = cfg.num_mels;
        // Zero the padded frames first: with odd valid lengths the last valid
        // convolution window reaches one frame past the utterance end, and
        // that frame must read as the zero padding a lone utterance would see.
        let input_mask = Tensor::from_fn(&[b * t_in, f_in], |i| {
            let row = i / f_in;
            if row % t_in < valid_frames[row / t_in] {
                T::one()
            } else {
                T::zero()
            }
        });
        let input_mask = tape.constant(input_mask);
        let features = tape.mul(features, input_mask)?;
        let x = tape.reshape(features, vec![b, 1, t_in, f_in])?;

        let (w1, b1) = (tape.param(&self.conv1_w), tape.param(&self.conv1_b));
        let x = tape.conv2d(x, w1, b1, 2, 1)?;
        let x = tape.relu(x);
        let t1 = EncoderConfig::conv_out_len(t_in);
        let f1 = EncoderConfig::conv_out_len(f_in);
        let valid1: Vec<usize> =
            valid_frames.iter().map(|&v| EncoderConfig::conv_out_len(v)).collect();
        let x = self.mask_4d(tape, x, &[b, cfg.conv1_channels(), t1, f1], &valid1)?;

        let (w2, b2) = (tape.param(&self.conv2_w), tape.param(&self.conv2_b));
        let x = tape.conv2d(x, w2, b2, 2, 1)?;
        let x = tape.relu(x);
        let t2 = EncoderConfig::conv_out_len(t1);
        let f2 = EncoderConfig::conv_out_len(f1);
        let valid2: Vec<usize> = valid1.iter().map(|&v| EncoderConfig::conv_out_len(v)).collect();
        let x = self.mask_4d(tape, x, &[b, cfg.conv2_channels(), t2, f2], &valid2)?;

        let x = tape.flatten_cf(x)?;
        let (wp, bp) = (tape.param(&self.proj_w), tape.param(&self.proj_b));
        let mut x = tape.linear(x, wp, Some(bp))?;
        x = tape.dropout(x, cfg.dropout_p, rng);

        let (time_mask, attn_mask) = self.masks(b, t2, &valid2);
        let time_mask = tape.constant(time_mask);
        let attn_mask = tape.constant(attn_mask);
        x = tape.mul(x, time_mask)?;

        for block in &self.blocks {
            x = block.forward(
                tape,
                x,
                b,
                t2,
                Some(attn_mask),
                Some(time_mask),
                cfg.dropout_p,
                rng,
            )?;
        }
        // Final states at padded positions are irrelevant but kept zero so
        // downstream consumers can splice or pool without extra masking.
        x = tape.mul(x, time_mask)?;

        Ok(EncodedBatch { hidden: x, batch: b, t_out: t2, valid: valid2 })
    }
}

impl<T: Scalar> ParamSet<T> for ConformerEncoder<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        for p in [
            &self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b,
            &self.proj_w, &self.proj_b,
        ] {
            f(p);
        }
        for b in &self.blocks {
            b.for_each_param(f);
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [
            &mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b,
            &mut self.proj_w, &mut self.proj_b,
        ] {
            f(p);
        }
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }
}
