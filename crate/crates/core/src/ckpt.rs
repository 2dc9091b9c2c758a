//! Self-describing checkpoint container.
//!
//! One file holds everything a run needs to resume or decode: a plain-text
//! header (format version, RNG identity, training state, the full config,
//! tokenizer and CMVN artifacts, and a tensor table with shapes and SHA-256
//! checksums) followed by the raw little-endian IEEE-754 payload bytes of
//! every tensor. The header is readable with `head`; the payload is
//! language-neutral. Loading verifies every checksum and refuses the file on
//! any mismatch, and `load(save(model))` reproduces the model bit-exactly.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::frontend::CmvnStats;
use crate::runconfig::RunConfig;
use crate::tensor::{ParamSet, Scalar, Tensor};
use crate::tokenizer::Tokenizer;
use crate::train::{Adam, AdamSlot, RegScheduleState};
use crate::{rng, Error, Result};

pub const MAGIC: &str = "asrlab-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub controller: RegScheduleState,
}

impl TrainState {
    pub fn fresh(patience: usize) -> Result<Self> {
        Ok(TrainState { step: 0, controller: RegScheduleState::new(patience)? })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Append a counted line block: `<name> <n>` then exactly `n` lines.
fn push_block(header: &mut String, name: &str, text: &str) {
    let lines: Vec<&str> = text.lines().collect();
    header.push_str(&format!("{name} {}\n", lines.len()));
    for line in lines {
        header.push_str(line);
        header.push('\n');
    }
}

/// Write a checkpoint. `adam` is optional: decode-only artifacts can omit
/// optimizer state, resumable ones carry it.
pub fn save_checkpoint<T: Scalar, M: ParamSet<T>>(
    path: &Path,
    config: &RunConfig,
    model: &M,
    tokenizer: &Tokenizer,
    cmvn: &CmvnStats,
    state: &TrainState,
    adam: Option<&Adam>,
) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} v{FORMAT_VERSION}\n"));
    // The generator is counter-derived, so algorithm + seed is its state.
    header.push_str(&format!("rng {} {}\n", rng::ALGORITHM, config.seed));
    header.push_str(&format!("step {}\n", state.step));
    header.push_str(&format!("stage {}\n", state.controller.current_stage));
    header.push_str(&format!("best_loss {:?}\n", state.controller.best_validation_loss));
    header.push_str(&format!("stall {}\n", state.controller.evals_since_improvement));
    header.push_str(&format!("patience {}\n", state.controller.patience));
    push_block(&mut header, "config", &config.to_toml_string());
    push_block(&mut header, "vocab", &tokenizer.vocab.to_text());
    push_block(&mut header, "bpe", &tokenizer.bpe.to_text());
    push_block(&mut header, "cmvn", &cmvn.to_text());

    let mut payload: Vec<u8> = Vec::new();
    let mut tensor_lines = String::new();
    let mut count = 0usize;
    let mut bad_name: Option<String> = None;
    model.for_each_param(&mut |p| {
        if bad_name.is_some() {
            return;
        }
        if p.name().is_empty() || p.name().chars().any(char::is_whitespace) {
            bad_name = Some(p.name().to_string());
            return;
        }
        let start = payload.len();
        for &v in p.value.data() {
            payload.extend_from_slice(&Scalar::to_f64(v).to_le_bytes());
        }
        let shape: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
        tensor_lines.push_str(&format!(
            "{} {} {}\n",
            p.name(),
            shape.join("x"),
            sha256_hex(&payload[start..])
        ));
        count += 1;
    });
    if let Some(name) = bad_name {
        return Err(Error::Checkpoint(format!(
            "parameter name {name:?} cannot be stored (empty or contains whitespace)"
        )));
    }
    header.push_str(&format!("tensors {count}\n"));
    header.push_str(&tensor_lines);

    match adam {
        None => header.push_str("adam none\n"),
        Some(opt) => {
            header.push_str(&format!("adam {} {}\n", opt.step, opt.slots.len()));
            for slot in &opt.slots {
                let start_m = payload.len();
                for &v in &slot.m {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                let sha_m = sha256_hex(&payload[start_m..]);
                let start_v = payload.len();
                for &v in &slot.v {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                let sha_v = sha256_hex(&payload[start_v..]);
                header.push_str(&format!("{} {sha_m} {sha_v}\n", slot.m.len()));
            }
        }
    }

    header.push_str(&format!("payload {}\n", payload.len()));
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// One stored tensor, decoded to `f64` (lossless for both training
/// precisions).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A fully verified checkpoint, ready to restore into freshly built objects.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub config: RunConfig,
    pub tokenizer: Tokenizer,
    pub cmvn: CmvnStats,
    pub state: TrainState,
    pub rng_algorithm: String,
    pub rng_seed: u64,
    tensors: Vec<TensorEntry>,
    index: HashMap<String, usize>,
    adam: Option<(usize, Vec<AdamSlot>)>,
}

/// Sequential line reader over the header bytes, tracking position for
/// diagnostics and for locating the payload start.
struct HeaderLines<'a> {
    bytes: &'a [u8],
    pos: usize,
    lineno: usize,
}

impl<'a> HeaderLines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(Error::Checkpoint(format!(
                "truncated header after line {}",
                self.lineno
            )));
        };
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| {
            Error::Checkpoint(format!("header line {} is not UTF-8", self.lineno + 1))
        })?;
        self.pos += nl + 1;
        self.lineno += 1;
        Ok(line)
    }

    /// A line of the form `<key> <value>`; returns the value.
    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "header line {}: expected `{key} ...`, found {line:?}",
                    self.lineno
                ))
            })
    }

    fn counted_block(&mut self, key: &str) -> Result<String> {
        let n: usize = parse_num(self.keyed(key)?, key)?;
        let mut text = String::new();
        for _ in 0..n {
            text.push_str(self.next()?);
            text.push('\n');
        }
        Ok(text)
    }
}

fn parse_num<N: std::str::FromStr>(s: &str, what: &str) -> Result<N> {
    s.trim().parse().map_err(|_| Error::Checkpoint(format!("bad {what} value {s:?}")))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    let origin = path.display().to_string();
    let mut lines = HeaderLines { bytes: &bytes, pos: 0, lineno: 0 };

    let magic = lines.next()?;
    let expected = format!("{MAGIC} v{FORMAT_VERSION}");
    if magic != expected {
        return Err(Error::Checkpoint(format!(
            "{origin}: not a checkpoint (first line {magic:?}, expected {expected:?})"
        )));
    }

    let rng_line = lines.keyed("rng")?;
    let (rng_algorithm, rng_seed) = rng_line
        .split_once(' ')
        .ok_or_else(|| Error::Checkpoint(format!("bad rng line {rng_line:?}")))?;
    let rng_seed: u64 = parse_num(rng_seed, "rng seed")?;

    let step: usize = parse_num(lines.keyed("step")?, "step")?;
    let stage: usize = parse_num(lines.keyed("stage")?, "stage")?;
    let best_loss: f64 = parse_num(lines.keyed("best_loss")?, "best_loss")?;
    let stall: usize = parse_num(lines.keyed("stall")?, "stall")?;
    let patience: usize = parse_num(lines.keyed("patience")?, "patience")?;

    let config_text = lines.counted_block("config")?;
    let vocab_text = lines.counted_block("vocab")?;
    let bpe_text = lines.counted_block("bpe")?;
    let cmvn_text = lines.counted_block("cmvn")?;

    let config = RunConfig::from_toml_str(&config_text)
        .map_err(|e| Error::Checkpoint(format!("{origin}: embedded {e}")))?;
    let vocab = crate::tokenizer::Vocabulary::from_text(&vocab_text, &origin)?;
    let bpe = crate::tokenizer::BpeModel::from_text(&bpe_text, &origin)?;
    let cmvn = CmvnStats::from_text(&cmvn_text, &origin)?;

    let num_tensors: usize = parse_num(lines.keyed("tensors")?, "tensors")?;
    struct PendingTensor {
        name: String,
        shape: Vec<usize>,
        numel: usize,
        sha: String,
    }
    let mut pending = Vec::with_capacity(num_tensors);
    let mut index = HashMap::with_capacity(num_tensors);
    for _ in 0..num_tensors {
        let line = lines.next()?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 3 {
            return Err(Error::Checkpoint(format!(
                "{origin}: bad tensor line {line:?} (want `name shape sha256`)"
            )));
        }
        let shape: Vec<usize> = fields[1]
            .split('x')
            .map(|d| parse_num(d, "tensor dimension"))
            .collect::<Result<_>>()?;
        if shape.is_empty() {
            return Err(Error::Checkpoint(format!("{origin}: tensor {} has no shape", fields[0])));
        }
        let numel = shape.iter().product();
        if index.insert(fields[0].to_string(), pending.len()).is_some() {
            return Err(Error::Checkpoint(format!(
                "{origin}: duplicate tensor name {:?}",
                fields[0]
            )));
        }
        pending.push(PendingTensor {
            name: fields[0].to_string(),
            shape,
            numel,
            sha: fields[2].to_string(),
        });
    }

    let adam_line = lines.keyed("adam")?;
    struct PendingSlot {
        numel: usize,
        sha_m: String,
        sha_v: String,
    }
    let mut adam_meta: Option<(usize, Vec<PendingSlot>)> = None;
    if adam_line != "none" {
        let (opt_step, nslots) = adam_line
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad adam line {adam_line:?}")))?;
        let opt_step: usize = parse_num(opt_step, "adam step")?;
        let nslots: usize = parse_num(nslots, "adam slot count")?;
        let mut slots = Vec::with_capacity(nslots);
        for _ in 0..nslots {
            let line = lines.next()?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 3 {
                return Err(Error::Checkpoint(format!(
                    "{origin}: bad adam slot line {line:?}"
                )));
            }
            slots.push(PendingSlot {
                numel: parse_num(fields[0], "adam slot size")?,
                sha_m: fields[1].to_string(),
                sha_v: fields[2].to_string(),
            });
        }
        adam_meta = Some((opt_step, slots));
    }

    let payload_len: usize = parse_num(lines.keyed("payload")?, "payload length")?;
    let payload = &bytes[lines.pos..];
    if payload.len() != payload_len {
        return Err(Error::Checkpoint(format!(
            "{origin}: payload is {} bytes but the header declares {payload_len}",
            payload.len()
        )));
    }

    // Slice the payload in header order, verifying every checksum.
    let mut cursor = 0usize;
    let mut take = |numel: usize, sha: &str, what: &str| -> Result<Vec<f64>> {
        let nbytes = numel * 8;
        let Some(blob) = payload.get(cursor..cursor + nbytes) else {
            return Err(Error::Checkpoint(format!(
                "{origin}: payload too short for {what}"
            )));
        };
        cursor += nbytes;
        let actual = sha256_hex(blob);
        if actual != sha {
            return Err(Error::Checkpoint(format!(
                "{origin}: checksum mismatch for {what}: stored {sha}, computed {actual}; \
                 refusing to load"
            )));
        }
        Ok(blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    };

    let mut tensors = Vec::with_capacity(pending.len());
    for t in pending {
        let data = take(t.numel, &t.sha, &format!("tensor {}", t.name))?;
        tensors.push(TensorEntry { name: t.name, shape: t.shape, data });
    }
    let adam = match adam_meta {
        None => None,
        Some((opt_step, slots)) => {
            let mut out = Vec::with_capacity(slots.len());
            for (i, s) in slots.iter().enumerate() {
                let m = take(s.numel, &s.sha_m, &format!("adam slot {i} m"))?;
                let v = take(s.numel, &s.sha_v, &format!("adam slot {i} v"))?;
                out.push(AdamSlot { m, v });
            }
            Some((opt_step, out))
        }
    };
    if cursor != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{origin}: {} trailing payload bytes",
            payload.len() - cursor
        )));
    }

    Ok(LoadedCheckpoint {
        config,
        tokenizer: Tokenizer { vocab, bpe },
        cmvn,
        state: TrainState {
            step,
            controller: RegScheduleState {
                current_stage: stage,
                best_validation_loss: best_loss,
                evals_since_improvement: stall,
                patience,
            },
        },
        rng_algorithm: rng_algorithm.to_string(),
        rng_seed,
        tensors,
        index,
        adam,
    })
}

impl LoadedCheckpoint {
    pub fn tensors(&self) -> impl Iterator<Item = &TensorEntry> {
        self.tensors.iter()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn has_adam(&self) -> bool {
        self.adam.is_some()
    }

    /// Overwrite every parameter of `model` with the stored values. The
    /// parameter and tensor name sets must match exactly, shapes included.
    pub fn restore_model<T: Scalar, M: ParamSet<T>>(&self, model: &mut M) -> Result<()> {
        let mut used = vec![false; self.tensors.len()];
        let mut failure: Option<Error> = None;
        model.visit_params(&mut |p| {
            if failure.is_some() {
                return;
            }
            let Some(&i) = self.index.get(p.name()) else {
                failure = Some(Error::Checkpoint(format!(
                    "checkpoint stores no tensor for parameter {:?}",
                    p.name()
                )));
                return;
            };
            let entry = &self.tensors[i];
            if used[i] {
                failure = Some(Error::Checkpoint(format!(
                    "model visits parameter {:?} twice",
                    p.name()
                )));
                return;
            }
            if entry.shape != p.value.shape() {
                failure = Some(Error::Checkpoint(format!(
                    "shape mismatch for {:?}: checkpoint {:?}, model {:?}",
                    p.name(),
                    entry.shape,
                    p.value.shape()
                )));
                return;
            }
            used[i] = true;
            p.value = Tensor::new(
                entry.shape.clone(),
                entry.data.iter().map(|&v| T::from_f64(v)).collect(),
            );
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(i) = used.iter().position(|&u| !u) {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor {:?} matches no model parameter",
                self.tensors[i].name
            )));
        }
        Ok(())
    }

    /// Rebuild the optimizer exactly as it was saved.
    pub fn restore_adam(&self) -> Result<Adam> {
        let Some((step, slots)) = &self.adam else {
            return Err(Error::Checkpoint(
                "checkpoint carries no optimizer state (saved with `adam none`)".to_string(),
            ));
        };
        let mut opt = Adam::new(self.config.optimizer.clone())?;
        opt.step = *step;
        opt.slots = slots.clone();
        Ok(opt)
    }
}
