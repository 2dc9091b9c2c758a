//! Encoder–adapter–LM stack: the Conformer encoder's output is spliced to
//! halve its frame rate, projected by a Linear–ReLU–Linear adapter into the
//! LM embedding space, and concatenated with prompt and transcript
//! embeddings as `(E_P, E_S, E_T)`. The LM base stays frozen; LoRA deltas on
//! its attention query/value projections carry the adaptation.

use crate::rng::DetRng;
use crate::tensor::{NodeId, Param, ParamSet, Scalar, Tape, Tensor};
use crate::Result;

use super::attention::MultiHeadAttention;
use super::encoder::{ConformerEncoder, EncodedBatch, FeedForward, FfnActivation, Norm};
use super::{
    init_embedding, sinusoid_rows, weight_param, zero_param, AdapterConfig, LmConfig,
    NEG_INF_MASK,
};

/// Concatenate each group of `k` consecutive frames feature-wise,
/// zero-padding the tail: `[b*t, d] -> [b*ceil(t/k), k*d]`.
pub fn splice_frames<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    b: usize,
    t: usize,
    k: usize,
) -> Result<(NodeId, usize)> {
    if k == 0 {
        return Err(crate::Error::Config("splice factor must be at least 1".to_string()));
    }
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] != b * t {
        return Err(crate::Error::shape(
            "splice_frames",
            format!("{shape:?} does not hold {b} x {t} rows"),
        ));
    }
    if k == 1 {
        return Ok((x, t));
    }
    let d = shape[1];
    let t_out = t.div_ceil(k);
    let pad_rows = t_out * k - t;
    let mut parts = Vec::with_capacity(b);
    for bi in 0..b {
        let mut rows = tape.slice_rows(x, bi * t, t)?;
        if pad_rows > 0 {
            let pad = tape.constant(Tensor::zeros(&[pad_rows, d]));
            rows = tape.concat_rows(&[rows, pad])?;
        }
        parts.push(tape.reshape(rows, vec![t_out, k * d])?);
    }
    let spliced = tape.concat_rows(&parts)?;
    Ok((spliced, t_out))
}

/// Spliced valid length: frames through the last one containing real data.
pub fn spliced_valid(valid: usize, k: usize) -> usize {
    valid.div_ceil(k)
}

/// Linear–ReLU–Linear projection from spliced encoder frames into the LM
/// embedding space.
#[derive(Debug, Clone)]
pub struct Adapter<T: Scalar> {
    pub cfg: AdapterConfig,
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(seed: u64, cfg: &AdapterConfig, encoder_d_model: usize) -> Self {
        let input = cfg.input_dim(encoder_d_model);
        Self {
            cfg: cfg.clone(),
            w1: weight_param(seed, "adapter.w1", cfg.hidden_dim, input),
            b1: zero_param("adapter.b1", &[cfg.hidden_dim]),
            w2: weight_param(seed, "adapter.w2", cfg.lm_dim, cfg.hidden_dim),
            b2: zero_param("adapter.b2", &[cfg.lm_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let (w1, b1) = (tape.param(&self.w1), tape.param(&self.b1));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(&self.w2), tape.param(&self.b2));
        tape.linear(h, w2, Some(b2))
    }
}

impl<T: Scalar> ParamSet<T> for Adapter<T> {
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

/// One pre-norm decoder-only LM layer: causal self-attention (with LoRA on
/// query/value) and a feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct LmLayer<T: Scalar> {
    pub ln_attn: Norm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln_ffn: Norm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> LmLayer<T> {
    pub fn new(seed: u64, name: &str, cfg: &LmConfig) -> Self {
        let d = cfg.d_model;
        let mut attn = MultiHeadAttention::new(seed, &format!("{name}.attn"), d, cfg.num_heads);
        if cfg.lora.enabled {
            attn = attn.with_lora(seed, &format!("{name}.attn"), &cfg.lora);
        }
        Self {
            ln_attn: Norm::new(&format!("{name}.ln_attn"), d),
            attn,
            ln_ffn: Norm::new(&format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(seed, &format!("{name}.ffn"), d, cfg.ffn_expansion, FfnActivation::Relu),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        b: usize,
        t: usize,
        mask: NodeId,
        dropout_p: f64,
        rng: &mut DetRng,
    ) -> Result<NodeId> {
        let mut x = x;
        let h = self.ln_attn.forward(tape, x)?;
        let h = self.attn.forward(tape, h, h, b, t, t, Some(mask))?;
        let h = tape.dropout(h, dropout_p, rng);
        x = tape.add(x, h)?;

        let h = self.ln_ffn.forward(tape, x)?;
        let h = self.ffn.forward(tape, h)?;
        let h = tape.dropout(h, dropout_p, rng);
        tape.add(x, h)
    }
}

impl<T: Scalar> ParamSet<T> for LmLayer<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln_attn.for_each_param(f);
        self.attn.for_each_param(f);
        self.ln_ffn.for_each_param(f);
        self.ffn.for_each_param(f);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln_attn.visit_params(f);
        self.attn.visit_params(f);
        self.ln_ffn.visit_params(f);
        self.ffn.visit_params(f);
    }
}

/// Decoder-only stand-in for the pre-trained LM: token embedding (tied to
/// the output head), sinusoidal positions, and causal pre-norm layers.
#[derive(Debug, Clone)]
pub struct StandInLm<T: Scalar> {
    pub cfg: LmConfig,
    pub embedding: Param<T>,
    pub layers: Vec<LmLayer<T>>,
    pub ln_out: Norm<T>,
}

impl<T: Scalar> StandInLm<T> {
    pub fn new(seed: u64, cfg: &LmConfig) -> Self {
        let mut rng = DetRng::for_purpose(seed, "init/lm.embedding", 0);
        let layers = (0..cfg.num_layers)
            .map(|i| LmLayer::new(seed, &format!("lm.layer{i}"), cfg))
            .collect();
        Self {
            cfg: cfg.clone(),
            embedding: Param::new(
                "lm.embedding",
                init_embedding(&mut rng, cfg.vocab_size, cfg.d_model),
            ),
            layers,
            ln_out: Norm::new("lm.ln_out", cfg.d_model),
        }
    }

    /// Freeze everything except the LoRA pairs, matching the published
    /// trainability policy.
    pub fn freeze_base(&mut self) {
        self.embedding.set_trainable(false);
        self.ln_out.visit_params(&mut |p| p.set_trainable(false));
        for layer in &mut self.layers {
            layer.ln_attn.visit_params(&mut |p| p.set_trainable(false));
            layer.ln_ffn.visit_params(&mut |p| p.set_trainable(false));
            layer.ffn.visit_params(&mut |p| p.set_trainable(false));
            layer.attn.freeze_base();
        }
    }

    /// A copy with every LoRA delta folded into its base projection and the
    /// LoRA pairs removed. Logits must match the unmerged model closely.
    pub fn merge_lora(&self) -> Self {
        let mut merged = self.clone();
        for layer in &mut merged.layers {
            if let Some(lora) = layer.attn.lora_q.take() {
                layer.attn.wq.value = lora.merged_weight(&layer.attn.wq.value);
            }
            if let Some(lora) = layer.attn.lora_v.take() {
                layer.attn.wv.value = lora.merged_weight(&layer.attn.wv.value);
            }
        }
        merged
    }

    /// Raw embedding rows for token ids (no scaling: the adapter learns to
    /// match this space).
    pub fn embed_tokens(&self, tape: &mut Tape<T>, ids: &[u32]) -> Result<NodeId> {
        let table = tape.param(&self.embedding);
        tape.embedding(table, ids)
    }

    /// Run the layer stack over pre-assembled input embeddings `[b*t, d]`
    /// under an additive attention mask, producing tied-head logits.
    pub fn forward_embeddings(
        &self,
        tape: &mut Tape<T>,
        embeddings: NodeId,
        b: usize,
        t: usize,
        mask: NodeId,
        rng: &mut DetRng,
    ) -> Result<NodeId> {
        if t > self.cfg.max_positions {
            return Err(crate::Error::shape(
                "lm",
                format!("{t} positions exceed max_positions {}", self.cfg.max_positions),
            ));
        }
        let d = self.cfg.d_model;
        let pe = sinusoid_rows((0..b * t).map(|i| (i % t) as f64), d);
        let pe = tape.constant(pe);
        let mut x = tape.add(embeddings, pe)?;
        x = tape.dropout(x, self.cfg.dropout_p, rng);
        for layer in &self.layers {
            x = layer.forward(tape, x, b, t, mask, self.cfg.dropout_p, rng)?;
        }
        x = self.ln_out.forward(tape, x)?;
        let table = tape.param(&self.embedding);
        let logits = tape.matmul_tb(x, table)?;
        // Same damping as the encoder-decoder head: an untrained model
        // should predict near-uniformly (initial loss about ln(vocab)).
        Ok(tape.scale(logits, 1.0 / (self.cfg.d_model as f64).sqrt()))
    }
}

impl<T: Scalar> ParamSet<T> for StandInLm<T> {
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

/// The concatenated `(E_P, E_S, E_T)` training sequence for one batch, with
/// region boundaries, next-token targets, and the transcript-only loss mask.
pub struct AssembledSequence {
    pub embeddings: NodeId,
    pub batch: usize,
    pub len: usize,
    pub prompt_len: usize,
    pub speech_len: usize,
    /// Padded transcript-region length (sos + tokens), shared by the batch.
    pub transcript_len: usize,
    /// Per-element valid spliced speech frames.
    pub valid_speech: Vec<usize>,
    /// Per-element transcript token counts (excluding sos and eos).
    pub transcript_tokens: Vec<usize>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<u8>,
}

impl AssembledSequence {
    /// Additive causal-plus-padding mask for the assembled layout.
    pub fn attention_mask<T: Scalar>(&self, num_heads: usize) -> Tensor<T> {
        let (b, l) = (self.batch, self.len);
        let (p, s) = (self.prompt_len, self.speech_len);
        Tensor::from_fn(&[b * num_heads, l, l], |i| {
            let j = i % l;
            let q = (i / l) % l;
            let bi = i / (l * l) / num_heads;
            let key_valid = if j < p {
                true
            } else if j < p + s {
                j - p < self.valid_speech[bi]
            } else {
                j - p - s < self.transcript_tokens[bi] + 1
            };
            if j <= q && key_valid {
                T::zero()
            } else {
                T::from_f64(NEG_INF_MASK)
            }
        })
    }
}

/// The full encoder–adapter–LM stack.
#[derive(Debug, Clone)]
pub struct SpeechLm<T: Scalar> {
    pub encoder: ConformerEncoder<T>,
    pub adapter: Adapter<T>,
    pub lm: StandInLm<T>,
}

impl<T: Scalar> SpeechLm<T> {
    pub fn new(seed: u64, encoder: ConformerEncoder<T>, adapter_cfg: &AdapterConfig, lm_cfg: &LmConfig) -> Self {
        assert_eq!(adapter_cfg.lm_dim, lm_cfg.d_model);
        let adapter = Adapter::new(seed, adapter_cfg, encoder.cfg.d_model);
        let mut lm = StandInLm::new(seed, lm_cfg);
        lm.freeze_base();
        Self { encoder, adapter, lm }
    }

    /// Encode, splice, and project one padded feature batch into LM space.
    pub fn speech_embeddings(
        &self,
        tape: &mut Tape<T>,
        features: NodeId,
        b: usize,
        t_in: usize,
        valid_frames: &[usize],
        rng: &mut DetRng,
    ) -> Result<(NodeId, usize, Vec<usize>)> {
        let enc: EncodedBatch = self.encoder.forward(tape, features, b, t_in, valid_frames, rng)?;
        let k = self.adapter.cfg.splice_factor;
        let (spliced, t_s) = splice_frames(tape, enc.hidden, b, enc.t_out, k)?;
        let projected = self.adapter.forward(tape, spliced)?;
        let valid_s = enc.valid.iter().map(|&v| spliced_valid(v, k)).collect();
        Ok((projected, t_s, valid_s))
    }

    /// Build the `(E_P, E_S, E_T)` sequence, next-token targets, and the
    /// transcript-only loss mask for a batch of transcripts.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        &self,
        tape: &mut Tape<T>,
        speech: NodeId,
        t_s: usize,
        valid_speech: Vec<usize>,
        prompt_ids: &[u32],
        transcripts: &[Vec<u32>],
    ) -> Result<AssembledSequence> {
        let b = valid_speech.len();
        if transcripts.len() != b || b == 0 {
            return Err(crate::Error::shape(
                "assemble",
                format!("{} transcripts for batch of {b}", transcripts.len()),
            ));
        }
        let p = prompt_ids.len();
        let t_max = transcripts.iter().map(Vec::len).max().unwrap();
        let tr_len = t_max + 1;
        let l = p + t_s + tr_len;
        let sos = crate::tokenizer::SOS;
        let eos = crate::tokenizer::EOS;
        let pad = crate::tokenizer::PAD;

        let mut parts = Vec::with_capacity(b * 3);
        let mut targets = vec![pad; b * l];
        let mut loss_mask = vec![0u8; b * l];
        for (bi, transcript) in transcripts.iter().enumerate() {
            if p > 0 {
                let prompt_emb = self.lm.embed_tokens(tape, prompt_ids)?;
                parts.push(prompt_emb);
            }
            parts.push(tape.slice_rows(speech, bi * t_s, t_s)?);
            let mut input_ids = Vec::with_capacity(tr_len);
            input_ids.push(sos);
            input_ids.extend_from_slice(transcript);
            input_ids.resize(tr_len, pad);
            parts.push(self.lm.embed_tokens(tape, &input_ids)?);

            let base = bi * l + p + t_s;
            for (j, &tok) in transcript.iter().enumerate() {
                targets[base + j] = tok;
                loss_mask[base + j] = 1;
            }
            targets[base + transcript.len()] = eos;
            loss_mask[base + transcript.len()] = 1;
        }
        let embeddings = tape.concat_rows(&parts)?;
        Ok(AssembledSequence {
            embeddings,
            batch: b,
            len: l,
            prompt_len: p,
            speech_len: t_s,
            transcript_len: tr_len,
            valid_speech,
            transcript_tokens: transcripts.iter().map(Vec::len).collect(),
            targets,
            loss_mask,
        })
    }

    /// Masked cross-entropy over the transcript region for one batch.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss(
        &self,
        tape: &mut Tape<T>,
        features: NodeId,
        b: usize,
        t_in: usize,
        valid_frames: &[usize],
        prompt_ids: &[u32],
        transcripts: &[Vec<u32>],
        rng: &mut DetRng,
    ) -> Result<NodeId> {
        let (speech, t_s, valid_s) =
            self.speech_embeddings(tape, features, b, t_in, valid_frames, rng)?;
        let seq = self.assemble(tape, speech, t_s, valid_s, prompt_ids, transcripts)?;
        let mask = tape.constant(seq.attention_mask(self.lm.cfg.num_heads));
        let logits = self.lm.forward_embeddings(tape, seq.embeddings, b, seq.len, mask, rng)?;
        tape.cross_entropy(logits, &seq.targets, &seq.loss_mask)
    }

    /// Precompute the speech embedding of a single utterance for decoding.
    pub fn decode_context(
        &self,
        features: &Tensor<T>,
        valid_frames: usize,
    ) -> Result<DecodeContext<T>> {
        let mut tape = Tape::inference();
        let mut rng = DetRng::new(0);
        let t_in = features.shape()[0];
        let node = tape.input(features.clone());
        let (speech, t_s, valid_s) =
            self.speech_embeddings(&mut tape, node, 1, t_in, &[valid_frames], &mut rng)?;
        Ok(DecodeContext {
            speech: tape.value(speech).clone(),
            t_s,
            valid_s: valid_s[0],
        })
    }

    /// Next-token scorer over a fixed utterance and prompt.
    pub fn scorer<'a>(
        &'a self,
        context: &'a DecodeContext<T>,
        prompt_ids: &'a [u32],
    ) -> SpeechLmScorer<'a, T> {
        SpeechLmScorer { model: self, context, prompt_ids }
    }

    /// Set the live dropout probability everywhere (the regularization
    /// controller moves this between stages).
    pub fn set_dropout(&mut self, p: f64) {
        self.encoder.cfg.dropout_p = p;
        self.lm.cfg.dropout_p = p;
    }

    /// Beam-search transcription of one utterance under a fixed prompt.
    pub fn decode(
        &self,
        features: &Tensor<T>,
        valid_frames: usize,
        prompt_ids: &[u32],
        params: &super::beam::BeamParams,
    ) -> Result<super::beam::DecodeOutcome> {
        let context = self.decode_context(features, valid_frames)?;
        let mut scorer = self.scorer(&context, prompt_ids);
        super::beam::beam_search(&mut scorer, params)
    }
}

impl<T: Scalar> ParamSet<T> for SpeechLm<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.for_each_param(f);
        self.adapter.for_each_param(f);
        self.lm.for_each_param(f);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_params(f);
        self.adapter.visit_params(f);
        self.lm.visit_params(f);
    }
}

/// Cached speech embedding of one utterance, reused across decode steps.
pub struct DecodeContext<T: Scalar> {
    pub speech: Tensor<T>,
    pub t_s: usize,
    pub valid_s: usize,
}

pub struct SpeechLmScorer<'a, T: Scalar> {
    model: &'a SpeechLm<T>,
    context: &'a DecodeContext<T>,
    prompt_ids: &'a [u32],
}

impl<T: Scalar> super::beam::StepScorer for SpeechLmScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.lm.cfg.vocab_size
    }

    fn step(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(crate::Error::shape("lm", "empty decoder prefix"));
        }
        let mut tape = Tape::inference();
        let mut rng = DetRng::new(0);
        let model = self.model;
        let p = self.prompt_ids.len();
        let (t_s, valid_s) = (self.context.t_s, self.context.valid_s);
        let l = p + t_s + prefix.len();

        let mut parts = Vec::new();
        if p > 0 {
            parts.push(model.lm.embed_tokens(&mut tape, self.prompt_ids)?);
        }
        parts.push(tape.input(self.context.speech.clone()));
        parts.push(model.lm.embed_tokens(&mut tape, prefix)?);
        let embeddings = tape.concat_rows(&parts)?;

        let mask = Tensor::from_fn(&[model.lm.cfg.num_heads, l, l], |i| {
            let j = i % l;
            let q = (i / l) % l;
            let key_valid = if j < p {
                true
            } else if j < p + t_s {
                j - p < valid_s
            } else {
                true
            };
            if j <= q && key_valid {
                T::zero()
            } else {
                T::from_f64(NEG_INF_MASK)
            }
        });
        let mask = tape.constant(mask);
        let logits = model.lm.forward_embeddings(&mut tape, embeddings, 1, l, mask, &mut rng)?;
        let log_probs = tape.log_softmax(logits)?;
        let v = model.lm.cfg.vocab_size;
        let data = tape.value(log_probs).data();
        Ok(data[(l - 1) * v..].iter().map(|&x| Scalar::to_f64(x)).collect())
    }
}
