//! Model architectures: Conformer encoder, Transformer (AED) decoder, and the
//! encoder–adapter–LM stack, plus beam-search decoding over either.

pub mod attention;
pub mod beam;
pub mod decoder;
pub mod encoder;
pub mod llm;

use crate::rng::DetRng;
use crate::tensor::{Param, Scalar, Tensor};

pub use attention::{
    causal_mask, causal_padding_mask, key_padding_mask, LoraPair, MultiHeadAttention,
};
pub use beam::{beam_search, BeamParams, DecodeOutcome, Hypothesis, StepScorer};
pub use decoder::{encode_context, AedContext, AedModel, AedScorer, TransformerDecoder};
pub use encoder::{ConformerBlock, ConformerEncoder, EncodedBatch};
pub use llm::{
    splice_frames, spliced_valid, Adapter, AssembledSequence, DecodeContext, SpeechLm,
    SpeechLmScorer, StandInLm,
};

/// Additive mask value treated as "minus infinity" in attention logits.
/// Finite so that softmax stays NaN-free even for fully masked rows.
pub const NEG_INF_MASK: f64 = -1e30;

/// Conformer encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub max_relative_distance: usize,
    pub num_mels: usize,
    /// Channel plan of the two subsampling convolutions, as fractions of
    /// `d_model`: first conv `d_model / 4`, second `d_model / 2`.
    pub subsample_stride: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_layers: 2,
            num_heads: 1,
            ffn_expansion: 4,
            conv_kernel: 33,
            max_relative_distance: 256,
            num_mels: crate::frontend::NUM_MELS,
            subsample_stride: 2,
            dropout_p: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn conv1_channels(&self) -> usize {
        (self.d_model / 4).max(1)
    }

    pub fn conv2_channels(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    /// Output length of one stride-2, kernel-3, pad-1 convolution.
    pub fn conv_out_len(len: usize) -> usize {
        if len == 0 {
            0
        } else {
            (len + 2 - 3) / 2 + 1
        }
    }

    /// Frames remaining after both subsampling convolutions (10 ms → 40 ms).
    pub fn subsampled_len(&self, frames: usize) -> usize {
        Self::conv_out_len(Self::conv_out_len(frames))
    }

    /// Mel bins remaining after both subsampling convolutions.
    pub fn subsampled_mels(&self) -> usize {
        Self::conv_out_len(Self::conv_out_len(self.num_mels))
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(crate::Error::Config(format!(
                "encoder d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(crate::Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if self.subsample_stride != 2 {
            return Err(crate::Error::Config(
                "only stride-2 subsampling is supported".to_string(),
            ));
        }
        Ok(())
    }

    /// Analytic parameter count; must equal brute-force enumeration.
    pub fn param_total(&self) -> usize {
        let d = self.d_model;
        let (c1, c2) = (self.conv1_channels(), self.conv2_channels());
        // conv1: w [c1,1,3,3] + bias; conv2: w [c2,c1,3,3] + bias.
        let mut n = c1 * 9 + c1 + c2 * c1 * 9 + c2;
        // Projection from flattened [c2 * f''] to d_model, with bias.
        n += c2 * self.subsampled_mels() * d + d;
        n += self.num_layers * self.block_params();
        n
    }

    fn ffn_params(&self) -> usize {
        let (d, e) = (self.d_model, self.ffn_expansion);
        d * e * d + e * d + e * d * d + d
    }

    fn block_params(&self) -> usize {
        let d = self.d_model;
        let ln = 2 * d;
        // Self-attention: q,k,v,out projections with bias, the relative-
        // position projection without bias, and the u/v content biases.
        let attn = 4 * (d * d + d) + d * d + 2 * d;
        // Convolution module: pointwise to 2d (GLU halves it back), depthwise
        // kernel, inner layer norm, pointwise back to d.
        let conv = d * 2 * d + 2 * d + d * self.conv_kernel + d + ln + d * d + d;
        2 * self.ffn_params() + attn + conv + 5 * ln
    }
}

/// Transformer decoder (AED branch) hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_p: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_layers: 2,
            num_heads: 1,
            ffn_expansion: 4,
            vocab_size: 64,
            max_positions: 512,
            dropout_p: 0.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(crate::Error::Config(format!(
                "decoder d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size <= crate::tokenizer::BLANK as usize {
            return Err(crate::Error::Config(format!(
                "vocab_size {} cannot even hold the special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Analytic parameter count. The output projection is tied to the
    /// embedding, so it contributes nothing on top of the embedding table.
    pub fn param_total(&self) -> usize {
        let d = self.d_model;
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * self.ffn_expansion * d + self.ffn_expansion * d
            + self.ffn_expansion * d * d + d;
        self.vocab_size * d + self.num_layers * (2 * attn + ffn + 3 * ln) + ln
    }
}

/// Linear–ReLU–Linear adapter between encoder output and LM embeddings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Number of 40 ms frames concatenated per output step (40 ms → 80 ms).
    pub splice_factor: usize,
    pub hidden_dim: usize,
    pub lm_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { splice_factor: 2, hidden_dim: 128, lm_dim: 64 }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.splice_factor < 1 {
            return Err(crate::Error::Config(
                "splice_factor must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self, encoder_d_model: usize) -> usize {
        encoder_d_model * self.splice_factor
    }

    pub fn param_total(&self, encoder_d_model: usize) -> usize {
        let i = self.input_dim(encoder_d_model);
        i * self.hidden_dim + self.hidden_dim + self.hidden_dim * self.lm_dim + self.lm_dim
    }
}

/// Decoder-only stand-in language model with optional LoRA on the attention
/// query/value projections.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_p: f64,
    pub lora: LoraConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_layers: 2,
            num_heads: 1,
            ffn_expansion: 4,
            vocab_size: 64,
            max_positions: 512,
            dropout_p: 0.0,
            lora: LoraConfig::default(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(crate::Error::Config(format!(
                "lm d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.lora.enabled && self.lora.rank == 0 {
            return Err(crate::Error::Config("LoRA rank must be positive".to_string()));
        }
        Ok(())
    }

    /// Analytic count of the frozen base (embedding tied to output head).
    pub fn base_param_total(&self) -> usize {
        let d = self.d_model;
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * self.ffn_expansion * d + self.ffn_expansion * d
            + self.ffn_expansion * d * d + d;
        self.vocab_size * d + self.num_layers * (attn + ffn + 2 * ln) + ln
    }

    /// Analytic count of the LoRA adapters (q and v per layer).
    pub fn lora_param_total(&self) -> usize {
        if !self.lora.enabled {
            return 0;
        }
        let d = self.d_model;
        self.num_layers * 2 * (self.lora.rank * d + d * self.lora.rank)
    }
}

/// Low-rank adaptation settings: delta `B·A` scaled by `alpha / rank`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { enabled: true, rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Named size presets. Desk presets allocate; the paper-width presets exist
/// for parameter accounting against published figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Xs,
    S,
    M,
    L,
}

impl SizePreset {
    pub const ALL: [SizePreset; 4] = [SizePreset::Xs, SizePreset::S, SizePreset::M, SizePreset::L];

    pub fn as_str(&self) -> &'static str {
        match self {
            SizePreset::Xs => "xs",
            SizePreset::S => "s",
            SizePreset::M => "m",
            SizePreset::L => "l",
        }
    }

    /// Full-scale width and depth pairs used by the published models.
    pub fn full_scale_encoder(&self) -> EncoderConfig {
        let (d_model, num_layers) = match self {
            SizePreset::Xs => (512, 12),
            SizePreset::S => (768, 16),
            SizePreset::M => (1024, 16),
            SizePreset::L => (1280, 16),
        };
        EncoderConfig {
            d_model,
            num_layers,
            num_heads: d_model / 64,
            ..EncoderConfig::default()
        }
    }

    pub fn full_scale_decoder(&self) -> DecoderConfig {
        let enc = self.full_scale_encoder();
        DecoderConfig {
            d_model: enc.d_model,
            num_layers: enc.num_layers,
            num_heads: enc.num_heads,
            vocab_size: crate::tokenizer::FULL_SCALE_VOCAB_SIZE,
            ..DecoderConfig::default()
        }
    }

    pub fn full_scale_adapter(&self) -> AdapterConfig {
        let enc = self.full_scale_encoder();
        AdapterConfig {
            splice_factor: 2,
            hidden_dim: 2 * enc.d_model,
            // Embedding width of the 7B-class LM backbone the published
            // stack plugs into.
            lm_dim: 3584,
        }
    }

    /// Desk-scale encoder: same topology, shrunk width and depth.
    pub fn desk_encoder(&self) -> EncoderConfig {
        let (d_model, num_layers) = match self {
            SizePreset::Xs => (64, 2),
            SizePreset::S => (96, 2),
            SizePreset::M => (128, 3),
            SizePreset::L => (128, 4),
        };
        EncoderConfig {
            d_model,
            num_layers,
            num_heads: (d_model / 32).max(1),
            max_relative_distance: 64,
            ..EncoderConfig::default()
        }
    }

    pub fn desk_decoder(&self, vocab_size: usize) -> DecoderConfig {
        let enc = self.desk_encoder();
        DecoderConfig {
            d_model: enc.d_model,
            num_layers: enc.num_layers,
            num_heads: enc.num_heads,
            vocab_size,
            ..DecoderConfig::default()
        }
    }

    pub fn desk_adapter(&self, lm_dim: usize) -> AdapterConfig {
        let enc = self.desk_encoder();
        AdapterConfig { splice_factor: 2, hidden_dim: 2 * enc.d_model, lm_dim }
    }

    pub fn desk_lm(&self, vocab_size: usize) -> LmConfig {
        let enc = self.desk_encoder();
        LmConfig {
            d_model: enc.d_model,
            num_layers: 2,
            num_heads: enc.num_heads,
            vocab_size,
            ..LmConfig::default()
        }
    }
}

impl std::str::FromStr for SizePreset {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xs" => Ok(SizePreset::Xs),
            "s" => Ok(SizePreset::S),
            "m" => Ok(SizePreset::M),
            "l" => Ok(SizePreset::L),
            other => Err(crate::Error::Config(format!(
                "unknown size preset {other:?} (expected xs|s|m|l)"
            ))),
        }
    }
}

/// Xavier-uniform initialization for a projection of the given fan shape.
pub fn init_xavier<T: Scalar>(
    rng: &mut DetRng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-limit, limit)))
}

/// Embedding initialization: normal with standard deviation `d^-1/2`.
pub fn init_embedding<T: Scalar>(rng: &mut DetRng, vocab: usize, d: usize) -> Tensor<T> {
    let std = (d as f64).powf(-0.5);
    Tensor::from_fn(&[vocab, d], |_| T::from_f64(rng.normal() * std))
}

/// A `[rows, cols]` weight parameter, Xavier-initialized from a stream
/// derived from the parameter's own name, so initialization does not depend
/// on allocation order.
pub fn weight_param<T: Scalar>(
    seed: u64,
    name: &str,
    rows: usize,
    cols: usize,
) -> Param<T> {
    let mut rng = DetRng::for_purpose(seed, &format!("init/{name}"), 0);
    Param::new(name, init_xavier(&mut rng, &[rows, cols], cols, rows))
}

/// A zero-initialized bias (or other zero-start) parameter.
pub fn zero_param<T: Scalar>(name: &str, shape: &[usize]) -> Param<T> {
    Param::new(name, Tensor::zeros(shape))
}

/// Layer-norm gain (ones) parameter.
pub fn ones_param<T: Scalar>(name: &str, shape: &[usize]) -> Param<T> {
    Param::new(name, Tensor::filled(shape, T::one()))
}

/// Sinusoidal position table rows for arbitrary (possibly negative)
/// positions: even columns sine, odd columns cosine, wavelengths from 2π to
/// 10000·2π across the depth.
pub fn sinusoid_rows<T: Scalar>(positions: impl Iterator<Item = f64>, d: usize) -> Tensor<T> {
    let pos: Vec<f64> = positions.collect();
    Tensor::from_fn(&[pos.len(), d], |i| {
        let (row, col) = (i / d, i % d);
        let exponent = 2.0 * (col / 2) as f64 / d as f64;
        let angle = pos[row] / 10000f64.powf(exponent);
        T::from_f64(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
