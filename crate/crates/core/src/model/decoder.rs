//! Transformer decoder of the attention-based encoder–decoder model:
//! pre-norm layers of causal self-attention, cross-attention over encoder
//! states, and feed-forward, with the token embedding tied to the output
//! projection.

use crate::rng::DetRng;
use crate::tensor::{NodeId, Param, ParamSet, Scalar, Tape};
use crate::Result;

use super::attention::{causal_padding_mask, key_padding_mask, MultiHeadAttention};
use super::encoder::{EncodedBatch, FeedForward, FfnActivation, Norm};
use super::{init_embedding, sinusoid_rows, DecoderConfig};

#[derive(Debug, Clone)]
pub struct DecoderLayer<T: Scalar> {
    pub ln_self: Norm<T>,
    pub self_attn: MultiHeadAttention<T>,
    pub ln_cross: Norm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub ln_ffn: Norm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn new(seed: u64, name: &str, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln_self: Norm::new(&format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(seed, &format!("{name}.self_attn"), d, cfg.num_heads),
            ln_cross: Norm::new(&format!("{name}.ln_cross"), d),
            cross_attn: MultiHeadAttention::new(
                seed,
                &format!("{name}.cross_attn"),
                d,
                cfg.num_heads,
            ),
            ln_ffn: Norm::new(&format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(seed, &format!("{name}.ffn"), d, cfg.ffn_expansion, FfnActivation::Relu),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        enc: NodeId,
        b: usize,
        t_dec: usize,
        t_enc: usize,
        self_mask: NodeId,
        cross_mask: NodeId,
        dropout_p: f64,
        rng: &mut DetRng,
    ) -> Result<NodeId> {
        let mut x = x;

        let h = self.ln_self.forward(tape, x)?;
        let h = self.self_attn.forward(tape, h, h, b, t_dec, t_dec, Some(self_mask))?;
        let h = tape.dropout(h, dropout_p, rng);
        x = tape.add(x, h)?;

        let h = self.ln_cross.forward(tape, x)?;
        let h = self.cross_attn.forward(tape, h, enc, b, t_dec, t_enc, Some(cross_mask))?;
        let h = tape.dropout(h, dropout_p, rng);
        x = tape.add(x, h)?;

        let h = self.ln_ffn.forward(tape, x)?;
        let h = self.ffn.forward(tape, h)?;
        let h = tape.dropout(h, dropout_p, rng);
        tape.add(x, h)
    }
}

impl<T: Scalar> ParamSet<T> for DecoderLayer<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln_self.for_each_param(f);
        self.self_attn.for_each_param(f);
        self.ln_cross.for_each_param(f);
        self.cross_attn.for_each_param(f);
        self.ln_ffn.for_each_param(f);
        self.ffn.for_each_param(f);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln_self.visit_params(f);
        self.self_attn.visit_params(f);
        self.ln_cross.visit_params(f);
        self.cross_attn.visit_params(f);
        self.ln_ffn.visit_params(f);
        self.ffn.visit_params(f);
    }
}

#[derive(Debug, Clone)]
pub struct TransformerDecoder<T: Scalar> {
    pub cfg: DecoderConfig,
    /// Token embedding, also used (tied) as the output projection.
    pub embedding: Param<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub ln_out: Norm<T>,
}

impl<T: Scalar> TransformerDecoder<T> {
    pub fn new(seed: u64, cfg: &DecoderConfig) -> Self {
        let mut rng = DetRng::for_purpose(seed, "init/decoder.embedding", 0);
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer::new(seed, &format!("decoder.layer{i}"), cfg))
            .collect();
        Self {
            cfg: cfg.clone(),
            embedding: Param::new(
                "decoder.embedding",
                init_embedding(&mut rng, cfg.vocab_size, cfg.d_model),
            ),
            layers,
            ln_out: Norm::new("decoder.ln_out", cfg.d_model),
        }
    }

    /// Embed token rows (scaled by sqrt(d)) and add sinusoidal positions,
    /// restarting the position count for each of the `b` rows of `ids`.
    fn embed(
        &self,
        tape: &mut Tape<T>,
        ids: &[u32],
        b: usize,
        t: usize,
    ) -> Result<NodeId> {
        let d = self.cfg.d_model;
        let table = tape.param(&self.embedding);
        let emb = tape.embedding(table, ids)?;
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pe = sinusoid_rows((0..b * t).map(|i| (i % t) as f64), d);
        let pe = tape.constant(pe);
        tape.add(emb, pe)
    }

    /// Hidden states for decoder inputs `ids` (row-major `[b, t_dec]`,
    /// sos-prefixed, pad-filled) against encoded audio, then tied-projection
    /// logits `[b * t_dec, vocab]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        enc: &EncodedBatch,
        ids: &[u32],
        valid_t: &[usize],
        rng: &mut DetRng,
    ) -> Result<NodeId> {
        let (b, t_enc) = (enc.batch, enc.t_out);
        if ids.is_empty() || ids.len() % b != 0 {
            return Err(crate::Error::shape(
                "decoder",
                format!("{} decoder input ids for batch of {b}", ids.len()),
            ));
        }
        let t_dec = ids.len() / b;
        if t_dec > self.cfg.max_positions {
            return Err(crate::Error::shape(
                "decoder",
                format!("{t_dec} positions exceed max_positions {}", self.cfg.max_positions),
            ));
        }
        if valid_t.len() != b || valid_t.iter().any(|&v| v == 0 || v > t_dec) {
            return Err(crate::Error::shape(
                "decoder",
                format!("valid target lengths {valid_t:?} for {b} x {t_dec}"),
            ));
        }
        let h = self.cfg.num_heads;
        let p = self.cfg.dropout_p;

        let self_mask = tape.constant(causal_padding_mask(b, h, t_dec, valid_t));
        let cross_mask = tape.constant(key_padding_mask(b, h, t_dec, t_enc, &enc.valid));

        let mut x = self.embed(tape, ids, b, t_dec)?;
        x = tape.dropout(x, p, rng);
        for layer in &self.layers {
            x = layer.forward(
                tape, x, enc.hidden, b, t_dec, t_enc, self_mask, cross_mask, p, rng,
            )?;
        }
        x = self.ln_out.forward(tape, x)?;
        let table = tape.param(&self.embedding);
        let logits = tape.matmul_tb(x, table)?;
        // The tied head would otherwise emit unit-variance logits at init
        // (normalized hidden states against sqrt(1/d)-scale embedding rows);
        // damping by sqrt(1/d) keeps an untrained model near-uniform, so the
        // initial loss sits at about ln(vocab).
        Ok(tape.scale(logits, 1.0 / (self.cfg.d_model as f64).sqrt()))
    }

    /// Log-probabilities of the next token after `prefix` (which must start
    /// with sos and be non-empty), for a single encoded utterance.
    pub fn next_token_log_probs(
        &self,
        tape: &mut Tape<T>,
        enc: &EncodedBatch,
        prefix: &[u32],
    ) -> Result<Vec<T>> {
        if prefix.is_empty() {
            return Err(crate::Error::shape("decoder", "empty decoder prefix"));
        }
        if enc.batch != 1 {
            return Err(crate::Error::shape(
                "decoder",
                format!("scoring expects a single utterance, got batch {}", enc.batch),
            ));
        }
        let mut rng = DetRng::new(0);
        let logits = self.forward(tape, enc, prefix, &[prefix.len()], &mut rng)?;
        let log_probs = tape.log_softmax(logits)?;
        let v = self.cfg.vocab_size;
        let data = tape.value(log_probs).data();
        Ok(data[(prefix.len() - 1) * v..].to_vec())
    }
}

impl<T: Scalar> ParamSet<T> for TransformerDecoder<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.embedding);
        for l in &self.layers {
            l.for_each_param(f);
        }
        self.ln_out.for_each_param(f);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.embedding);
        for l in &mut self.layers {
            l.visit_params(f);
        }
        self.ln_out.visit_params(f);
    }
}

/// Cached encoder output of one utterance, reused across decode steps.
pub struct AedContext<T: Scalar> {
    pub enc_hidden: crate::tensor::Tensor<T>,
    pub t_out: usize,
    pub valid: usize,
}

/// Encode a single utterance (inference mode, no dropout) into a reusable
/// decode context.
pub fn encode_context<T: Scalar>(
    encoder: &super::encoder::ConformerEncoder<T>,
    features: &crate::tensor::Tensor<T>,
    valid_frames: usize,
) -> Result<AedContext<T>> {
    let mut tape = Tape::inference();
    let mut rng = DetRng::new(0);
    let t_in = features.shape()[0];
    let node = tape.input(features.clone());
    let enc = encoder.forward(&mut tape, node, 1, t_in, &[valid_frames], &mut rng)?;
    Ok(AedContext {
        enc_hidden: tape.value(enc.hidden).clone(),
        t_out: enc.t_out,
        valid: enc.valid[0],
    })
}

pub struct AedScorer<'a, T: Scalar> {
    pub decoder: &'a TransformerDecoder<T>,
    pub context: &'a AedContext<T>,
}

impl<T: Scalar> super::beam::StepScorer for AedScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.decoder.cfg.vocab_size
    }

    fn step(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let hidden = tape.input(self.context.enc_hidden.clone());
        let enc = EncodedBatch {
            hidden,
            batch: 1,
            t_out: self.context.t_out,
            valid: vec![self.context.valid],
        };
        let row = self.decoder.next_token_log_probs(&mut tape, &enc, prefix)?;
        Ok(row.iter().map(|&x| Scalar::to_f64(x)).collect())
    }
}

/// The full attention-based encoder–decoder model.
#[derive(Debug, Clone)]
pub struct AedModel<T: Scalar> {
    pub encoder: super::encoder::ConformerEncoder<T>,
    pub decoder: TransformerDecoder<T>,
}

impl<T: Scalar> AedModel<T> {
    pub fn new(seed: u64, enc_cfg: &super::EncoderConfig, dec_cfg: &DecoderConfig) -> Self {
        Self {
            encoder: super::encoder::ConformerEncoder::new(seed, enc_cfg),
            decoder: TransformerDecoder::new(seed, dec_cfg),
        }
    }

    /// Set the live dropout probability everywhere (the regularization
    /// controller moves this between stages).
    pub fn set_dropout(&mut self, p: f64) {
        self.encoder.cfg.dropout_p = p;
        self.decoder.cfg.dropout_p = p;
    }

    /// Teacher-forced cross-entropy over all valid target positions of a
    /// padded batch. Inputs per utterance are `[sos, y_1..y_T]`, targets are
    /// `[y_1..y_T, eos]`.
    pub fn training_loss(
        &self,
        tape: &mut Tape<T>,
        features: NodeId,
        b: usize,
        t_in: usize,
        valid_frames: &[usize],
        transcripts: &[Vec<u32>],
        rng: &mut DetRng,
    ) -> Result<NodeId> {
        if transcripts.len() != b || b == 0 {
            return Err(crate::Error::shape(
                "aed",
                format!("{} transcripts for batch of {b}", transcripts.len()),
            ));
        }
        if let Some(i) = transcripts.iter().position(Vec::is_empty) {
            return Err(crate::Error::Config(format!(
                "transcript {i} is empty; zero-length targets are rejected"
            )));
        }
        let enc = self.encoder.forward(tape, features, b, t_in, valid_frames, rng)?;

        let sos = crate::tokenizer::SOS;
        let eos = crate::tokenizer::EOS;
        let pad = crate::tokenizer::PAD;
        let t_dec = transcripts.iter().map(Vec::len).max().unwrap() + 1;
        let mut ids = Vec::with_capacity(b * t_dec);
        let mut targets = vec![pad; b * t_dec];
        let mut mask = vec![0u8; b * t_dec];
        let mut valid_t = Vec::with_capacity(b);
        for (bi, transcript) in transcripts.iter().enumerate() {
            ids.push(sos);
            ids.extend_from_slice(transcript);
            ids.resize((bi + 1) * t_dec, pad);
            for (j, &tok) in transcript.iter().enumerate() {
                targets[bi * t_dec + j] = tok;
                mask[bi * t_dec + j] = 1;
            }
            targets[bi * t_dec + transcript.len()] = eos;
            mask[bi * t_dec + transcript.len()] = 1;
            valid_t.push(transcript.len() + 1);
        }

        let logits = self.decoder.forward(tape, &enc, &ids, &valid_t, rng)?;
        tape.cross_entropy(logits, &targets, &mask)
    }

    /// Beam-search transcription of one utterance.
    pub fn decode(
        &self,
        features: &crate::tensor::Tensor<T>,
        valid_frames: usize,
        params: &super::beam::BeamParams,
    ) -> Result<super::beam::DecodeOutcome> {
        let context = encode_context(&self.encoder, features, valid_frames)?;
        let mut scorer = AedScorer { decoder: &self.decoder, context: &context };
        super::beam::beam_search(&mut scorer, params)
    }
}

impl<T: Scalar> ParamSet<T> for AedModel<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.for_each_param(f);
        self.decoder.for_each_param(f);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
    }
}
