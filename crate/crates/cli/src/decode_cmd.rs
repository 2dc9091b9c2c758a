//! `asrlab decode`: transcribe a manifest of wav files with a trained
//! checkpoint. Beam search is deterministic, so repeated runs produce
//! byte-identical output files. Output lines keep the manifest's order.

use std::path::PathBuf;

use asrlab::ckpt::{load_checkpoint, LoadedCheckpoint};
use asrlab::frontend::{compute_fbank, read_wav};
use asrlab::model::{AedModel, BeamParams, SpeechLm};
use asrlab::runconfig::ModelKind;
use asrlab::Result;
use clap::Args;

use crate::manifest::{self, ManifestEntry};

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Wav list: `utt_id<TAB>wav_path` per line (a transcript column is
    /// allowed and ignored)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output file of `utt_id<TAB>hypothesis` lines
    #[arg(long)]
    pub output: PathBuf,
    /// Override the checkpoint's beam size
    #[arg(long)]
    pub beam: Option<usize>,
    /// Override the checkpoint's decode length limit
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
    /// Accepted for interface uniformity; decoding draws no random numbers
    #[arg(long)]
    pub seed: Option<u64>,
}

enum Model {
    Aed(AedModel<f32>),
    Llm(SpeechLm<f32>),
}

fn decode_one(
    model: &Model,
    loaded: &LoadedCheckpoint,
    entry: &ManifestEntry,
    params: &BeamParams,
) -> Result<String> {
    let wave = read_wav(&entry.wav_path)?;
    let feats = loaded.cmvn.apply(&compute_fbank::<f32>(&wave)?)?;
    let t = feats.dim(0);
    let outcome = match model {
        Model::Aed(m) => m.decode(&feats, t, params)?,
        Model::Llm(m) => m.decode(&feats, t, &[], params)?,
    };
    loaded.tokenizer.decode(&outcome.hypothesis.tokens)
}

pub fn run(args: DecodeArgs) -> Result<i32> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let mut decode_cfg = loaded.config.decode.clone();
    if let Some(beam) = args.beam {
        decode_cfg.beam_size = beam;
    }
    if let Some(max_len) = args.max_len {
        decode_cfg.max_len = max_len;
    }
    let params = decode_cfg.beam_params();

    let vocab_size = loaded.tokenizer.vocab.size();
    let model = match loaded.config.model {
        ModelKind::Aed => {
            let mut m = loaded.config.build_aed::<f32>(vocab_size);
            loaded.restore_model(&mut m)?;
            Model::Aed(m)
        }
        ModelKind::Llm => {
            let mut m = loaded.config.build_llm::<f32>(vocab_size);
            loaded.restore_model(&mut m)?;
            Model::Llm(m)
        }
    };

    let entries = manifest::read(&args.manifest)?;
    let mut out = String::new();
    let mut failures = 0usize;
    for entry in &entries {
        match decode_one(&model, &loaded, entry, &params) {
            Ok(hyp) => out.push_str(&format!("{}\t{hyp}\n", entry.utt_id)),
            Err(e) => {
                eprintln!("decode error: {}: {e}", entry.utt_id);
                failures += 1;
            }
        }
    }
    std::fs::write(&args.output, out)?;
    if failures > 0 {
        eprintln!("{failures} of {} utterances failed", entries.len());
        return Ok(1);
    }
    Ok(0)
}
