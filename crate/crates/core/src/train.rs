//! Training machinery for both model families: Adam updates under global
//! gradient-norm clipping, the warmup/inverse-square-root learning-rate
//! schedule, frame-budget batching, and the progressive regularization
//! controller that tightens dropout and SpecAugment only once validation
//! loss stops improving.

use crate::frontend::SpecAugmentPolicy;
use crate::model::{AedModel, SpeechLm};
use crate::rng::DetRng;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor};
use crate::{Error, Result};

use sha2::{Digest, Sha256};

// ---------------------------------------------------------------------------
// Optimizer configuration and learning-rate schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Peak learning rate at `reference_d_model`; wider models train at
    /// `base_peak_lr / sqrt(d_model / reference_d_model)`.
    pub base_peak_lr: f64,
    pub reference_d_model: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling applied before every update.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_peak_lr: 1e-3,
            reference_d_model: 64,
            warmup_steps: 400,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("base_peak_lr", self.base_peak_lr),
            ("clip_norm", self.clip_norm),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(Error::Config(format!("optimizer {name} must be positive, got {v}")));
            }
        }
        if self.warmup_steps == 0 || self.reference_d_model == 0 {
            return Err(Error::Config(
                "optimizer warmup_steps and reference_d_model must be positive".to_string(),
            ));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config(format!(
                "optimizer betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }

    /// Peak learning rate for a model of width `d_model`.
    pub fn peak_lr(&self, d_model: usize) -> f64 {
        self.base_peak_lr / (d_model as f64 / self.reference_d_model as f64).sqrt()
    }
}

/// Learning rate for 1-based `step`: linear warmup to the width-scaled peak,
/// then inverse-square-root decay. `lr(0)` is defined as 0 and never used by
/// the step loop.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig, d_model: usize) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let peak = cfg.peak_lr(d_model);
    let w = cfg.warmup_steps as f64;
    let s = step as f64;
    peak * (s / w).min((w / s).sqrt())
}

// ---------------------------------------------------------------------------
// Adam with global-norm clipping
// ---------------------------------------------------------------------------

/// First/second moment estimates for one parameter tensor, kept in `f64`
/// regardless of the training precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    /// Completed updates; bias correction uses `step + 1` during an update.
    pub step: usize,
    /// One slot per parameter in visitation order (empty until first touch).
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, step: 0, slots: Vec::new() })
    }

    /// Apply one update from the gradients recorded on `tape`, scaled to
    /// `lr`. Returns the pre-clip global gradient norm. Parameters without a
    /// gradient (frozen, or unused in this graph) are left untouched.
    pub fn apply<T: Scalar, M: ParamSet<T>>(
        &mut self,
        model: &mut M,
        tape: &Tape<T>,
        lr: f64,
    ) -> Result<f64> {
        // Pass 1: global norm over every present gradient.
        let mut sq_sum = 0.0f64;
        model.for_each_param(&mut |p| {
            if let Some(g) = tape.param_grad(p) {
                for &x in g.data() {
                    let x = Scalar::to_f64(x);
                    sq_sum += x * x;
                }
            }
        });
        let norm = sq_sum.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm {norm} at optimizer step {}; aborting before the update",
                self.step + 1
            )));
        }
        let clip_scale = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };

        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);

        let slots = &mut self.slots;
        let mut index = 0usize;
        model.visit_params(&mut |p| {
            if index == slots.len() {
                slots.push(AdamSlot::default());
            }
            let slot = &mut slots[index];
            index += 1;
            let Some(g) = tape.param_grad(&*p) else {
                return;
            };
            if slot.m.is_empty() {
                slot.m = vec![0.0; g.data().len()];
                slot.v = vec![0.0; g.data().len()];
            }
            for (i, &gv) in g.data().iter().enumerate() {
                let gv = Scalar::to_f64(gv) * clip_scale;
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * gv;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * gv * gv;
                let update = lr * (slot.m[i] / bc1) / ((slot.v[i] / bc2).sqrt() + eps);
                let old = Scalar::to_f64(p.value.data()[i]);
                p.value.data_mut()[i] = T::from_f64(old - update);
            }
        });
        self.step += 1;
        Ok(norm)
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One padded training batch. Feature rows of utterance `i` occupy
/// `[i * t_max, i * t_max + valid_frames[i])`; the rest is zero padding.
#[derive(Debug, Clone)]
pub struct TrainBatch<T: Scalar> {
    pub utt_ids: Vec<String>,
    pub features: Tensor<T>,
    pub t_max: usize,
    pub valid_frames: Vec<usize>,
    pub transcripts: Vec<Vec<u32>>,
    /// Shared decoding prompt for encoder-adapter-LM training; empty for the
    /// encoder-decoder model.
    pub prompt_ids: Vec<u32>,
}

impl<T: Scalar> TrainBatch<T> {
    /// Pad a set of `(utt_id, features [t, mels], token ids)` into one batch.
    /// Rejects empty batches, zero-length transcripts, and mixed widths.
    pub fn new(items: Vec<(String, Tensor<T>, Vec<u32>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("cannot build an empty training batch".to_string()));
        }
        let mels = items[0].1.last_dim();
        for (id, feats, tokens) in &items {
            if feats.ndim() != 2 || feats.last_dim() != mels || feats.dim(0) == 0 {
                return Err(Error::shape(
                    "batch",
                    format!("utterance {id}: features {:?} (want [t > 0, {mels}])", feats.shape()),
                ));
            }
            if tokens.is_empty() {
                return Err(Error::Config(format!(
                    "utterance {id} has a zero-length transcript"
                )));
            }
        }
        let t_max = items.iter().map(|(_, f, _)| f.dim(0)).max().unwrap();
        let b = items.len();
        let mut features = Tensor::zeros(&[b * t_max, mels]);
        let mut utt_ids = Vec::with_capacity(b);
        let mut valid_frames = Vec::with_capacity(b);
        let mut transcripts = Vec::with_capacity(b);
        for (bi, (id, feats, tokens)) in items.into_iter().enumerate() {
            let t = feats.dim(0);
            features.data_mut()[bi * t_max * mels..bi * t_max * mels + t * mels]
                .copy_from_slice(feats.data());
            utt_ids.push(id);
            valid_frames.push(t);
            transcripts.push(tokens);
        }
        Ok(TrainBatch {
            utt_ids,
            features,
            t_max,
            valid_frames,
            transcripts,
            prompt_ids: Vec::new(),
        })
    }

    pub fn with_prompt(mut self, prompt_ids: Vec<u32>) -> Self {
        self.prompt_ids = prompt_ids;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.utt_ids.len()
    }
}

/// Group utterances into batches whose padded frame area (`t_max * count`)
/// stays within `frame_budget`, after sorting by length so that padding is
/// minimal. A single over-budget utterance still forms its own batch.
pub fn bucket_by_frames<T: Scalar>(
    mut items: Vec<(String, Tensor<T>, Vec<u32>)>,
    frame_budget: usize,
) -> Result<Vec<TrainBatch<T>>> {
    if frame_budget == 0 {
        return Err(Error::Config("frame budget must be positive".to_string()));
    }
    items.sort_by(|a, b| a.1.dim(0).cmp(&b.1.dim(0)).then_with(|| a.0.cmp(&b.0)));
    let mut batches = Vec::new();
    let mut current: Vec<(String, Tensor<T>, Vec<u32>)> = Vec::new();
    let mut current_max = 0usize;
    for item in items {
        let t = item.1.dim(0);
        let new_max = current_max.max(t);
        if !current.is_empty() && new_max * (current.len() + 1) > frame_budget {
            batches.push(TrainBatch::new(std::mem::take(&mut current))?);
            current_max = 0;
        }
        current_max = current_max.max(t);
        current.push(item);
    }
    if !current.is_empty() {
        batches.push(TrainBatch::new(current)?);
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Progressive regularization controller
// ---------------------------------------------------------------------------

/// One rung of the regularization ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct RegStage {
    pub stage_index: usize,
    pub dropout_p: f64,
    pub specaugment: SpecAugmentPolicy,
}

/// Default three-stage ladder: train clean first, then add moderate and
/// finally full regularization as overfitting emerges.
pub fn default_stage_ladder() -> Vec<RegStage> {
    vec![
        RegStage {
            stage_index: 0,
            dropout_p: 0.0,
            specaugment: SpecAugmentPolicy::disabled(),
        },
        RegStage {
            stage_index: 1,
            dropout_p: 0.1,
            specaugment: SpecAugmentPolicy {
                num_freq_masks: 1,
                max_freq_width: 5,
                num_time_masks: 1,
                max_time_width: 20,
                enabled: true,
            },
        },
        RegStage {
            stage_index: 2,
            dropout_p: 0.2,
            specaugment: SpecAugmentPolicy::default(),
        },
    ]
}

/// Stages must be indexed consecutively with non-decreasing strength.
pub fn validate_stage_ladder(stages: &[RegStage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("regularization ladder has no stages".to_string()));
    }
    for (i, stage) in stages.iter().enumerate() {
        if stage.stage_index != i {
            return Err(Error::Config(format!(
                "stage {i} carries index {}; ladder must be consecutively indexed",
                stage.stage_index
            )));
        }
        stage.specaugment.validate()?;
        if i == 0 {
            continue;
        }
        let prev = &stages[i - 1];
        let widths_ok = stage.specaugment.max_freq_width >= prev.specaugment.max_freq_width
            && stage.specaugment.max_time_width >= prev.specaugment.max_time_width;
        if stage.dropout_p < prev.dropout_p || !widths_ok {
            return Err(Error::Config(format!(
                "stage {i} is weaker than stage {}; the ladder must be non-decreasing",
                i - 1
            )));
        }
    }
    Ok(())
}

/// Controller state: where we are on the ladder and how long validation loss
/// has failed to improve.
#[derive(Debug, Clone, PartialEq)]
pub struct RegScheduleState {
    pub current_stage: usize,
    pub best_validation_loss: f64,
    pub evals_since_improvement: usize,
    pub patience: usize,
}

impl RegScheduleState {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("controller patience must be positive".to_string()));
        }
        Ok(RegScheduleState {
            current_stage: 0,
            best_validation_loss: f64::INFINITY,
            evals_since_improvement: 0,
            patience,
        })
    }
}

/// Fold one validation loss into the controller. An improvement resets the
/// counter; `patience` consecutive non-improvements advance one stage and
/// consume the window. The stage never retreats and saturates at
/// `num_stages - 1`.
pub fn reg_controller_update(
    state: &RegScheduleState,
    num_stages: usize,
    validation_loss: f64,
) -> RegScheduleState {
    let mut next = state.clone();
    if validation_loss < state.best_validation_loss {
        next.best_validation_loss = validation_loss;
        next.evals_since_improvement = 0;
        return next;
    }
    next.evals_since_improvement += 1;
    if next.evals_since_improvement >= next.patience {
        next.evals_since_improvement = 0;
        if next.current_stage + 1 < num_stages {
            next.current_stage += 1;
        }
    }
    next
}

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

/// Per-step record mirrored into the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One tab-separated training log line: step, stage, lr, loss.
pub fn format_log_line(step: usize, stage: usize, lr: f64, loss: f64) -> String {
    format!("{step}\t{stage}\t{lr:.6e}\t{loss:.6}")
}

fn check_finite(loss: f64, family: &str, step: usize, batch_ids: &[String]) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "{family} training step {step} produced non-finite loss {loss} on batch \
         [{}]; aborting before the parameter update",
        batch_ids.join(", ")
    )))
}

/// One teacher-forced update of the encoder-decoder model. Returns loss and
/// gradient-norm statistics; a non-finite loss aborts without updating.
pub fn train_step_aed<T: Scalar>(
    model: &mut AedModel<T>,
    batch: &TrainBatch<T>,
    opt: &mut Adam,
    lr: f64,
    rng: &mut DetRng,
) -> Result<StepStats> {
    let mut tape = Tape::training();
    let features = tape.input(batch.features.clone());
    let loss = model.training_loss(
        &mut tape,
        features,
        batch.batch_size(),
        batch.t_max,
        &batch.valid_frames,
        &batch.transcripts,
        rng,
    )?;
    let loss_val = Scalar::to_f64(tape.value(loss).item());
    check_finite(loss_val, "aed", opt.step + 1, &batch.utt_ids)?;
    tape.backward(loss)?;
    let grad_norm = opt.apply(model, &tape, lr)?;
    Ok(StepStats { loss: loss_val, grad_norm, lr })
}

/// One transcript-masked update of the encoder-adapter-LM stack. The frozen
/// LM base receives no gradient and is bit-identical afterwards.
pub fn train_step_llm<T: Scalar>(
    model: &mut SpeechLm<T>,
    batch: &TrainBatch<T>,
    opt: &mut Adam,
    lr: f64,
    rng: &mut DetRng,
) -> Result<StepStats> {
    let mut tape = Tape::training();
    let features = tape.input(batch.features.clone());
    let loss = model.training_loss(
        &mut tape,
        features,
        batch.batch_size(),
        batch.t_max,
        &batch.valid_frames,
        &batch.prompt_ids,
        &batch.transcripts,
        rng,
    )?;
    let loss_val = Scalar::to_f64(tape.value(loss).item());
    check_finite(loss_val, "llm", opt.step + 1, &batch.utt_ids)?;
    tape.backward(loss)?;
    let grad_norm = opt.apply(model, &tape, lr)?;
    Ok(StepStats { loss: loss_val, grad_norm, lr })
}

/// SHA-256 over the little-endian bytes of every frozen (non-trainable)
/// parameter in visitation order — the invariant certificate for the LLM
/// trainability policy.
pub fn frozen_checksum<T: Scalar, M: ParamSet<T>>(model: &M) -> String {
    let mut hasher = Sha256::new();
    model.for_each_param(&mut |p| {
        if p.trainable() {
            return;
        }
        hasher.update(p.name().as_bytes());
        for &v in p.value.data() {
            hasher.update(Scalar::to_f64(v).to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
