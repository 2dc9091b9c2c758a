//! `asrlab inspect`: checkpoint summaries and parameter accounting.
//!
//! With `--checkpoint`, prints what the file holds: training position,
//! vocabulary, tensor census, per-component sizes. With `--config`, prints
//! the analytic parameter budget of the configured model at desk scale
//! (verified against enumeration of the actually allocated weights) next to
//! the published-width figures for the same preset.

use std::collections::BTreeMap;
use std::path::PathBuf;

use asrlab::ckpt::load_checkpoint;
use asrlab::runconfig::{ModelKind, RunConfig};
use asrlab::tensor::ParamSet;
use asrlab::tokenizer::FULL_SCALE_VOCAB_SIZE;
use asrlab::{Error, Result};
use clap::Args;

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    /// Run config whose parameter budget to report
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary size assumed for desk-scale counts in `--config` mode
    #[arg(long = "vocab-size", default_value_t = 64)]
    pub vocab_size: usize,
    /// Machine-readable output
    #[arg(long)]
    pub json: bool,
    /// Accepted for interface uniformity; inspection draws no random numbers
    #[arg(long)]
    pub seed: Option<u64>,
}

fn inspect_checkpoint(path: &PathBuf, json: bool) -> Result<i32> {
    let loaded = load_checkpoint(path)?;
    // Group tensor sizes by their first dotted name segment.
    let mut components: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for t in loaded.tensors() {
        let component = t.name.split('.').next().unwrap_or("?").to_string();
        *components.entry(component).or_insert(0) += t.data.len();
        total += t.data.len();
    }

    if json {
        let report = serde_json::json!({
            "format_version": asrlab::ckpt::FORMAT_VERSION,
            "rng": { "algorithm": loaded.rng_algorithm, "seed": loaded.rng_seed },
            "model": loaded.config.model.as_str(),
            "preset": loaded.config.preset.as_str(),
            "step": loaded.state.step,
            "stage": loaded.state.controller.current_stage,
            "best_validation_loss": loaded.state.controller.best_validation_loss,
            "vocab_size": loaded.tokenizer.vocab.size(),
            "bpe_merges": loaded.tokenizer.bpe.merges().len(),
            "cmvn_frames": loaded.cmvn.frame_count(),
            "tensors": loaded.tensors().count(),
            "params_total": total,
            "params_by_component": components,
            "optimizer_state": loaded.has_adam(),
        });
        println!("{report:#}");
        return Ok(0);
    }

    println!("checkpoint {}", path.display());
    println!("format v{}", asrlab::ckpt::FORMAT_VERSION);
    println!("rng {} seed {}", loaded.rng_algorithm, loaded.rng_seed);
    println!("model {} preset {}", loaded.config.model.as_str(), loaded.config.preset.as_str());
    println!(
        "step {} stage {} best_loss {:?} stall {}/{}",
        loaded.state.step,
        loaded.state.controller.current_stage,
        loaded.state.controller.best_validation_loss,
        loaded.state.controller.evals_since_improvement,
        loaded.state.controller.patience,
    );
    println!(
        "vocab {} tokens ({} chars, {} bpe pieces, {} merges)",
        loaded.tokenizer.vocab.size(),
        loaded.tokenizer.vocab.num_char_tokens(),
        loaded.tokenizer.vocab.num_bpe_tokens(),
        loaded.tokenizer.bpe.merges().len(),
    );
    println!("cmvn over {} frames", loaded.cmvn.frame_count());
    println!("tensors {}", loaded.tensors().count());
    println!("params {total}");
    for (component, n) in &components {
        println!("  {component} {n}");
    }
    println!("optimizer state {}", if loaded.has_adam() { "present" } else { "absent" });
    Ok(0)
}

/// Brute-force enumeration of allocated weights must agree with the analytic
/// formulas; a mismatch means a formula is lying and is reported as such.
fn check_enumeration(component: &str, analytic: usize, enumerated: usize) -> Result<()> {
    if analytic != enumerated {
        return Err(Error::Config(format!(
            "{component}: analytic parameter count {analytic} disagrees with enumeration \
             {enumerated}"
        )));
    }
    Ok(())
}

fn inspect_config(path: &PathBuf, vocab_size: usize, json: bool) -> Result<i32> {
    let config = RunConfig::load(path)?;
    let preset = config.preset;

    // Desk scale: analytic counts, verified against the allocated model.
    let mut desk: Vec<(&str, usize)> = Vec::new();
    let desk_total;
    match config.model {
        ModelKind::Aed => {
            let enc_cfg = preset.desk_encoder();
            let dec_cfg = preset.desk_decoder(vocab_size);
            let model = config.build_aed::<f32>(vocab_size);
            check_enumeration(
                "encoder+decoder",
                enc_cfg.param_total() + dec_cfg.param_total(),
                model.total_numel(),
            )?;
            desk.push(("encoder", enc_cfg.param_total()));
            desk.push(("decoder", dec_cfg.param_total()));
            desk_total = enc_cfg.param_total() + dec_cfg.param_total();
        }
        ModelKind::Llm => {
            let enc_cfg = preset.desk_encoder();
            let mut lm_cfg = preset.desk_lm(vocab_size);
            lm_cfg.lora = config.lora.clone();
            let adapter_cfg = preset.desk_adapter(lm_cfg.d_model);
            let model = config.build_llm::<f32>(vocab_size);
            let analytic = enc_cfg.param_total()
                + adapter_cfg.param_total(enc_cfg.d_model)
                + lm_cfg.base_param_total()
                + lm_cfg.lora_param_total();
            check_enumeration("encoder+adapter+lm", analytic, model.total_numel())?;
            desk.push(("encoder", enc_cfg.param_total()));
            desk.push(("adapter", adapter_cfg.param_total(enc_cfg.d_model)));
            desk.push(("lm_base", lm_cfg.base_param_total()));
            desk.push(("lora", lm_cfg.lora_param_total()));
            desk_total = analytic;
        }
    }

    // Published widths: counting only, nothing is allocated.
    let mut full: Vec<(&str, usize)> = Vec::new();
    let full_total;
    match config.model {
        ModelKind::Aed => {
            let enc = preset.full_scale_encoder();
            let dec = preset.full_scale_decoder();
            full.push(("encoder", enc.param_total()));
            full.push(("decoder", dec.param_total()));
            full_total = enc.param_total() + dec.param_total();
        }
        ModelKind::Llm => {
            let enc = preset.full_scale_encoder();
            let adapter = preset.full_scale_adapter();
            full.push(("encoder", enc.param_total()));
            full.push(("adapter", adapter.param_total(enc.d_model)));
            full_total = enc.param_total() + adapter.param_total(enc.d_model);
        }
    }

    if json {
        let report = serde_json::json!({
            "model": config.model.as_str(),
            "preset": preset.as_str(),
            "desk": {
                "vocab_size": vocab_size,
                "components": desk.iter().map(|(n, c)| serde_json::json!({
                    "name": n, "params": c,
                })).collect::<Vec<_>>(),
                "total": desk_total,
                "enumeration_checked": true,
            },
            "full_scale": {
                "vocab_size": FULL_SCALE_VOCAB_SIZE,
                "components": full.iter().map(|(n, c)| serde_json::json!({
                    "name": n, "params": c,
                })).collect::<Vec<_>>(),
                "total": full_total,
            },
        });
        println!("{report:#}");
        return Ok(0);
    }

    println!("model {} preset {}", config.model.as_str(), preset.as_str());
    println!("desk scale (vocab {vocab_size}, analytic == enumeration):");
    for (name, count) in &desk {
        println!("  {name} {count}");
    }
    println!("  total {desk_total}");
    println!("published widths (vocab {FULL_SCALE_VOCAB_SIZE}):");
    for (name, count) in &full {
        println!("  {name} {count}");
    }
    println!("  total {full_total}");
    Ok(0)
}

pub fn run(args: InspectArgs) -> Result<i32> {
    match (&args.checkpoint, &args.config) {
        (Some(ckpt), None) => inspect_checkpoint(ckpt, args.json),
        (None, Some(config)) => inspect_config(config, args.vocab_size, args.json),
        _ => Err(Error::Config(
            "inspect needs exactly one of --checkpoint or --config".to_string(),
        )),
    }
}
