//! Experiment configuration: one TOML file describes a complete run. Every
//! field has a default, unknown keys are rejected with the offending line,
//! and parse → serialize → parse is a fixpoint so configs can be normalized
//! and embedded in checkpoints verbatim.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{AedModel, BeamParams, ConformerEncoder, LoraConfig, SizePreset, SpeechLm};
use crate::tensor::Scalar;
use crate::train::OptimizerConfig;
use crate::{Error, Result};

/// Which architecture the run trains and decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Conformer encoder with a Transformer decoder, trained end to end.
    Aed,
    /// Conformer encoder feeding a frozen decoder-only LM through an adapter,
    /// with LoRA as the only trainable part of the LM.
    Llm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Aed => "aed",
            ModelKind::Llm => "llm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aed" => Ok(ModelKind::Aed),
            "llm" => Ok(ModelKind::Llm),
            other => Err(Error::Config(format!("unknown model kind {other:?} (expected aed|llm)"))),
        }
    }
}

/// Where the run reads data and writes artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest of training utterances, `utt_id<TAB>wav_path<TAB>transcript`
    /// per line. Empty means "not set" and fails validation at train time.
    pub train_manifest: PathBuf,
    /// Held-out manifest for the regularization controller; empty reuses the
    /// training manifest (fine for overfit runs).
    pub valid_manifest: PathBuf,
    pub output_dir: PathBuf,
}

/// Tokenizer construction knobs. Zero merges keeps a pure character
/// vocabulary, which is what the synthetic corpora want.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSettings {
    pub bpe_merges: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings { bpe_merges: 0 }
    }
}

/// Training-loop pacing: how long to run and how often to log, validate, and
/// checkpoint. All intervals are in optimizer steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub steps: usize,
    /// Frame budget per batch for length bucketing.
    pub frame_budget: usize,
    pub log_every: usize,
    pub validate_every: usize,
    pub checkpoint_every: usize,
    /// Consecutive non-improving validations before the regularization
    /// controller advances a stage.
    pub patience: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            steps: 500,
            frame_budget: 2000,
            log_every: 10,
            validate_every: 50,
            checkpoint_every: 100,
            patience: 3,
        }
    }
}

/// Beam-search settings used by decode and by end-of-training evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 4, max_len: 32, length_penalty: 0.6 }
    }
}

impl DecodeConfig {
    pub fn beam_params(&self) -> BeamParams {
        BeamParams {
            length_penalty: self.length_penalty,
            ..BeamParams::new(self.beam_size, self.max_len)
        }
    }
}

/// The complete run description. Scalar fields first so the TOML form keeps
/// top-level keys ahead of the section tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub preset: SizePreset,
    pub seed: u64,
    pub data: DataConfig,
    pub tokenizer: TokenizerSettings,
    pub optimizer: OptimizerConfig,
    pub training: LoopConfig,
    pub decode: DecodeConfig,
    /// LoRA shape for the LLM path; ignored by the AED path.
    pub lora: LoraConfig,
}

impl Default for ModelKind {
    fn default() -> Self {
        ModelKind::Aed
    }
}

impl Default for SizePreset {
    fn default() -> Self {
        SizePreset::Xs
    }
}

impl RunConfig {
    /// Parse from TOML text. Errors keep the parser's line/column message so
    /// a bad config points at the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        // Serialization of a validated config cannot fail: every field is a
        // plain scalar, string, or table of those.
        toml::to_string_pretty(self).expect("RunConfig serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let positives = [
            ("training.steps", self.training.steps),
            ("training.frame_budget", self.training.frame_budget),
            ("training.log_every", self.training.log_every),
            ("training.validate_every", self.training.validate_every),
            ("training.checkpoint_every", self.training.checkpoint_every),
            ("training.patience", self.training.patience),
            ("decode.beam_size", self.decode.beam_size),
            ("decode.max_len", self.decode.max_len),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.decode.length_penalty < 0.0 {
            return Err(Error::Config(format!(
                "decode.length_penalty must be non-negative, got {}",
                self.decode.length_penalty
            )));
        }
        if self.lora.enabled && self.lora.rank == 0 {
            return Err(Error::Config("lora.rank must be positive when enabled".to_string()));
        }
        Ok(())
    }

    /// The training manifest, or a config error naming the missing field.
    pub fn require_train_manifest(&self) -> Result<&Path> {
        if self.data.train_manifest.as_os_str().is_empty() {
            return Err(Error::Config(
                "data.train_manifest is not set; point it at a manifest file".to_string(),
            ));
        }
        Ok(&self.data.train_manifest)
    }

    /// Validation manifest with the documented fallback to the training set.
    pub fn valid_manifest(&self) -> Result<&Path> {
        if self.data.valid_manifest.as_os_str().is_empty() {
            self.require_train_manifest()
        } else {
            Ok(&self.data.valid_manifest)
        }
    }

    /// Instantiate the desk-scale encoder-decoder model for this run.
    pub fn build_aed<T: Scalar>(&self, vocab_size: usize) -> AedModel<T> {
        AedModel::new(
            self.seed,
            &self.preset.desk_encoder(),
            &self.preset.desk_decoder(vocab_size),
        )
    }

    /// Instantiate the desk-scale encoder-adapter-LM stack for this run,
    /// with the configured LoRA shape applied to the LM.
    pub fn build_llm<T: Scalar>(&self, vocab_size: usize) -> SpeechLm<T> {
        let enc_cfg = self.preset.desk_encoder();
        let mut lm_cfg = self.preset.desk_lm(vocab_size);
        lm_cfg.lora = self.lora.clone();
        let adapter_cfg = self.preset.desk_adapter(lm_cfg.d_model);
        SpeechLm::new(
            self.seed,
            ConformerEncoder::new(self.seed, &enc_cfg),
            &adapter_cfg,
            &lm_cfg,
        )
    }
}
