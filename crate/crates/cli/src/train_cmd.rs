//! `asrlab train`: the full training loop for both model families.
//!
//! Every random draw is derived from `(seed, purpose, step)`, so a run
//! resumed from a checkpoint continues on exactly the trajectory the
//! uninterrupted run would have taken, loss for loss, bit for bit.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use asrlab::ckpt::{load_checkpoint, save_checkpoint, LoadedCheckpoint, TrainState};
use asrlab::frontend::{compute_fbank, read_wav, spec_augment, CmvnStats, SpecAugmentPolicy};
use asrlab::model::{AedModel, SpeechLm};
use asrlab::rng::DetRng;
use asrlab::runconfig::{ModelKind, RunConfig};
use asrlab::tensor::{Scalar, Tape, Tensor};
use asrlab::tokenizer::Tokenizer;
use asrlab::train::{
    bucket_by_frames, default_stage_ladder, format_log_line, frozen_checksum, lr_schedule,
    reg_controller_update, train_step_aed, train_step_llm, Adam, StepStats, TrainBatch,
    validate_stage_ladder,
};
use asrlab::{Error, Result};
use clap::Args;

use crate::manifest;

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from a checkpoint written earlier under the same config
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Either model family behind one face, so the loop below stays single.
enum Model {
    Aed(AedModel<f32>),
    Llm(SpeechLm<f32>),
}

impl Model {
    fn build(config: &RunConfig, vocab_size: usize) -> Self {
        match config.model {
            ModelKind::Aed => Model::Aed(config.build_aed(vocab_size)),
            ModelKind::Llm => Model::Llm(config.build_llm(vocab_size)),
        }
    }

    fn set_dropout(&mut self, p: f64) {
        match self {
            Model::Aed(m) => m.set_dropout(p),
            Model::Llm(m) => m.set_dropout(p),
        }
    }

    fn train_step(
        &mut self,
        batch: &TrainBatch<f32>,
        opt: &mut Adam,
        lr: f64,
        rng: &mut DetRng,
    ) -> Result<StepStats> {
        match self {
            Model::Aed(m) => train_step_aed(m, batch, opt, lr, rng),
            Model::Llm(m) => train_step_llm(m, batch, opt, lr, rng),
        }
    }

    /// Loss without gradients, dropout, or augmentation.
    fn eval_loss(&self, batch: &TrainBatch<f32>, rng: &mut DetRng) -> Result<f64> {
        let mut tape = Tape::inference();
        let node = tape.input(batch.features.clone());
        let loss = match self {
            Model::Aed(m) => m.training_loss(
                &mut tape,
                node,
                batch.batch_size(),
                batch.t_max,
                &batch.valid_frames,
                &batch.transcripts,
                rng,
            )?,
            Model::Llm(m) => m.training_loss(
                &mut tape,
                node,
                batch.batch_size(),
                batch.t_max,
                &batch.valid_frames,
                &batch.prompt_ids,
                &batch.transcripts,
                rng,
            )?,
        };
        Ok(Scalar::to_f64(tape.value(loss).item()))
    }

    fn save(
        &self,
        path: &std::path::Path,
        config: &RunConfig,
        tokenizer: &Tokenizer,
        cmvn: &CmvnStats,
        state: &TrainState,
        adam: Option<&Adam>,
    ) -> Result<()> {
        match self {
            Model::Aed(m) => save_checkpoint(path, config, m, tokenizer, cmvn, state, adam),
            Model::Llm(m) => save_checkpoint(path, config, m, tokenizer, cmvn, state, adam),
        }
    }

    fn restore(&mut self, loaded: &LoadedCheckpoint) -> Result<()> {
        match self {
            Model::Aed(m) => loaded.restore_model(m),
            Model::Llm(m) => loaded.restore_model(m),
        }
    }

    fn frozen_checksum(&self) -> String {
        match self {
            Model::Aed(m) => frozen_checksum(m),
            Model::Llm(m) => frozen_checksum(m),
        }
    }
}

/// One utterance ready for batching: id, normalized features, token ids.
type Item = (String, Tensor<f32>, Vec<u32>);

fn load_features(path: &std::path::Path) -> Result<Vec<(String, Tensor<f32>, String)>> {
    let entries = manifest::read(path)?;
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} lists no utterances",
            path.display()
        )));
    }
    entries
        .iter()
        .map(|e| {
            if e.transcript.is_empty() {
                return Err(Error::Config(format!(
                    "{}: utterance {} has no transcript; training requires one",
                    path.display(),
                    e.utt_id
                )));
            }
            let wave = read_wav(&e.wav_path)?;
            let feats = compute_fbank::<f32>(&wave)?;
            Ok((e.utt_id.clone(), feats, e.transcript.clone()))
        })
        .collect()
}

fn encode_items(
    raw: &[(String, Tensor<f32>, String)],
    cmvn: &CmvnStats,
    tokenizer: &Tokenizer,
) -> Result<Vec<Item>> {
    raw.iter()
        .map(|(id, feats, text)| {
            let ids = tokenizer.encode(text);
            if ids.is_empty() {
                return Err(Error::Config(format!(
                    "utterance {id}: transcript {text:?} encodes to zero tokens"
                )));
            }
            Ok((id.clone(), cmvn.apply(feats)?, ids))
        })
        .collect()
}

/// Rebuild one batch from its blueprint, applying this step's SpecAugment.
fn build_batch(
    items: &[Item],
    by_id: &HashMap<&str, usize>,
    ids: &[String],
    policy: &SpecAugmentPolicy,
    seed: u64,
    step: usize,
) -> Result<TrainBatch<f32>> {
    let mut batch_items = Vec::with_capacity(ids.len());
    for id in ids {
        let i = by_id[id.as_str()];
        let (ref uid, ref feats, ref toks) = items[i];
        let mut f = feats.clone();
        let mut rng = DetRng::for_purpose(seed, &format!("train/specaug/{uid}"), step as u64);
        spec_augment(&mut f, policy, &mut rng)?;
        batch_items.push((uid.clone(), f, toks.clone()));
    }
    TrainBatch::new(batch_items)
}

pub fn run(args: TrainArgs) -> Result<i32> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let resumed = match &args.resume {
        None => None,
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.config != config {
                return Err(Error::Config(format!(
                    "checkpoint {} was written under a different config; resuming would \
                     change the trajectory",
                    path.display()
                )));
            }
            Some(loaded)
        }
    };

    let train_manifest = config.require_train_manifest()?.to_path_buf();
    let valid_manifest = config.valid_manifest()?.to_path_buf();
    let out_dir = config.data.output_dir.clone();
    if out_dir.as_os_str().is_empty() {
        return Err(Error::Config("data.output_dir is not set".to_string()));
    }
    std::fs::create_dir_all(&out_dir)?;

    // Frontend artifacts: from the checkpoint when resuming (they define the
    // model's input and output spaces), from the training data otherwise.
    let train_raw = load_features(&train_manifest)
        .map_err(|e| Error::Config(format!("data.train_manifest: {e}")))?;
    let (tokenizer, cmvn) = match &resumed {
        Some(loaded) => (loaded.tokenizer.clone(), loaded.cmvn.clone()),
        None => {
            let texts: Vec<String> = train_raw.iter().map(|(_, _, t)| t.clone()).collect();
            let tokenizer = Tokenizer::train(&texts, config.tokenizer.bpe_merges)?;
            let feats: Vec<Tensor<f32>> =
                train_raw.iter().map(|(_, f, _)| f.clone()).collect();
            (tokenizer, CmvnStats::fit(&feats)?)
        }
    };
    let vocab_size = tokenizer.vocab.size();

    let items = encode_items(&train_raw, &cmvn, &tokenizer)?;
    let by_id: HashMap<&str, usize> =
        items.iter().enumerate().map(|(i, (id, _, _))| (id.as_str(), i)).collect();
    // Batch composition is fixed up front; contents are re-augmented per step.
    let blueprints: Vec<Vec<String>> =
        bucket_by_frames(items.clone(), config.training.frame_budget)?
            .into_iter()
            .map(|b| b.utt_ids)
            .collect();

    let val_batches: Vec<TrainBatch<f32>> = if valid_manifest == train_manifest {
        bucket_by_frames(items.clone(), config.training.frame_budget)?
    } else {
        let val_raw = load_features(&valid_manifest)
            .map_err(|e| Error::Config(format!("data.valid_manifest: {e}")))?;
        bucket_by_frames(encode_items(&val_raw, &cmvn, &tokenizer)?, config.training.frame_budget)?
    };

    let ladder = default_stage_ladder();
    validate_stage_ladder(&ladder)?;

    let mut model = Model::build(&config, vocab_size);
    let mut opt = Adam::new(config.optimizer.clone())?;
    let mut state = TrainState::fresh(config.training.patience)?;
    if let Some(loaded) = &resumed {
        model.restore(loaded)?;
        opt = loaded.restore_adam()?;
        state = loaded.state.clone();
    }
    model.set_dropout(ladder[state.controller.current_stage].dropout_p);

    config.save(&out_dir.join("config.toml"))?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .write(true)
        .open(out_dir.join("train.log"))?;

    if config.model == ModelKind::Llm {
        println!("frozen-base checksum {}", model.frozen_checksum());
    }
    let d_model = config.preset.desk_encoder().d_model;
    let total_steps = config.training.steps;
    if state.step >= total_steps {
        println!("checkpoint is already at step {} of {total_steps}; nothing to do", state.step);
        return Ok(0);
    }

    for step in (state.step + 1)..=total_steps {
        let stage = state.controller.current_stage;
        let blueprint = &blueprints[(step - 1) % blueprints.len()];
        let batch = build_batch(
            &items,
            &by_id,
            blueprint,
            &ladder[stage].specaugment,
            config.seed,
            step,
        )?;
        let lr = lr_schedule(step, &config.optimizer, d_model);
        let mut rng = DetRng::for_purpose(config.seed, "train/dropout", step as u64);
        let stats = model.train_step(&batch, &mut opt, lr, &mut rng)?;
        state.step = step;

        if step % config.training.log_every == 0 || step == total_steps {
            let line = format_log_line(step, stage, lr, stats.loss);
            println!("{line}");
            writeln!(log, "{line}")?;
        }

        if step % config.training.validate_every == 0 {
            let mut vrng = DetRng::for_purpose(config.seed, "train/valid", step as u64);
            let mut total = 0.0;
            for vb in &val_batches {
                total += model.eval_loss(vb, &mut vrng)?;
            }
            let vloss = total / val_batches.len() as f64;
            let next = reg_controller_update(&state.controller, ladder.len(), vloss);
            if next.current_stage != stage {
                model.set_dropout(ladder[next.current_stage].dropout_p);
                let note = format!(
                    "step {step}: validation loss {vloss:.6} stalled; regularization \
                     stage {stage} -> {}",
                    next.current_stage
                );
                println!("{note}");
                writeln!(log, "# {note}")?;
            }
            state.controller = next;
        }

        if step % config.training.checkpoint_every == 0 && step != total_steps {
            let path = out_dir.join(format!("step{step:06}.ckpt"));
            model.save(&path, &config, &tokenizer, &cmvn, &state, Some(&opt))?;
        }
    }

    let final_path = out_dir.join("final.ckpt");
    model.save(&final_path, &config, &tokenizer, &cmvn, &state, Some(&opt))?;
    if config.model == ModelKind::Llm {
        println!("frozen-base checksum {}", model.frozen_checksum());
    }
    println!("trained {total_steps} steps; wrote {}", final_path.display());
    Ok(0)
}
