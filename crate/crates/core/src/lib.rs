//! Desk-scale speech recognition lab.
//!
//! Two end-to-end ASR model families built on a minimal reverse-mode autodiff
//! core:
//!
//! * an attention encoder-decoder (Conformer encoder + Transformer decoder
//!   with beam search), and
//! * an encoder-adapter-LM stack (the same encoder, a frame-splicing
//!   Linear-ReLU-Linear adapter, and a small decoder-only language model
//!   fine-tuned through LoRA with a frozen base).
//!
//! Supporting subsystems: log-Mel filterbank frontend with CMVN and
//! SpecAugment, a mixed Chinese-character/BPE tokenizer, CER/WER scoring,
//! training loops with a progressive regularization controller, a synthetic
//! tone-coded corpus generator, and a self-describing checkpoint format.
//!
//! All floating-point compute is generic over `f32`/`f64`; `f64` is used by
//! the gradient-check and determinism test suites. With the default
//! `parallel` feature the hot inner loops run on rayon; disabling it yields a
//! sequential build that produces bit-identical results.

pub mod ckpt;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod par;
pub mod rng;
pub mod runconfig;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
