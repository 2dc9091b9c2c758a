//! Deterministic tone-coded corpus generator: each vocabulary character maps
//! to a distinct pure tone, utterances are concatenations of 100 ms tone
//! segments, and everything derives from one seed. The mapping is injective,
//! so with zero noise the recognition task is separable by construction.

use std::path::{Path, PathBuf};

use crate::frontend::{write_wav, Waveform, SAMPLE_RATE};
use crate::rng::DetRng;
use crate::{Error, Result};

/// Seconds of audio per token.
pub const SEGMENT_SECS: f64 = 0.1;

/// Samples per token segment at the fixed 16 kHz rate.
pub const SEGMENT_SAMPLES: usize = (SAMPLE_RATE as usize) / 10;

/// Cosine fade applied to each segment edge so concatenation is click-free.
const FADE_SAMPLES: usize = 80; // 5 ms

/// Peak amplitude of a tone before noise.
const TONE_AMPLITUDE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Characters of the synthetic language; each gets its own tone.
    pub vocab: Vec<char>,
    /// Utterance length in tokens, drawn uniformly from `min_tokens..=max_tokens`.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Amplitude of additive uniform noise (0 disables it).
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab: "一二三四五六七八九十".chars().collect(),
            min_tokens: 3,
            max_tokens: 8,
            noise_level: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(Error::Config("synthetic vocabulary is empty".to_string()));
        }
        let mut sorted: Vec<char> = self.vocab.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.vocab.len() {
            return Err(Error::Config(
                "synthetic vocabulary has duplicate characters; the tone mapping must stay \
                 injective"
                    .to_string(),
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "utterance length range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Config(format!(
                "noise level {} must be non-negative",
                self.noise_level
            )));
        }
        Ok(())
    }

    /// Tone assigned to vocabulary index `i`: 300 Hz, 380 Hz, 460 Hz, …
    /// Distinct indices get distinct frequencies, all well under Nyquist for
    /// any realistic vocabulary size.
    pub fn tone_frequency(&self, index: usize) -> f64 {
        300.0 + 80.0 * index as f64
    }

    fn char_index(&self, c: char) -> Option<usize> {
        self.vocab.iter().position(|&v| v == c)
    }

    /// Synthesize the waveform for a transcript (tones plus optional noise).
    /// `rng` drives only the noise; with zero noise the signal is a pure
    /// function of the text.
    pub fn render(&self, transcript: &str, rng: &mut DetRng) -> Result<Waveform> {
        let mut samples = Vec::with_capacity(transcript.chars().count() * SEGMENT_SAMPLES);
        for c in transcript.chars() {
            let index = self.char_index(c).ok_or_else(|| {
                Error::Config(format!("character {c:?} is not in the synthetic vocabulary"))
            })?;
            let freq = self.tone_frequency(index);
            let omega = 2.0 * std::f64::consts::PI * freq / f64::from(SAMPLE_RATE);
            for s in 0..SEGMENT_SAMPLES {
                let fade_in = (s + 1).min(FADE_SAMPLES) as f64 / FADE_SAMPLES as f64;
                let fade_out = (SEGMENT_SAMPLES - s).min(FADE_SAMPLES) as f64 / FADE_SAMPLES as f64;
                let envelope = TONE_AMPLITUDE * fade_in.min(fade_out);
                samples.push(envelope * (omega * s as f64).sin());
            }
        }
        if self.noise_level > 0.0 {
            for s in &mut samples {
                *s += self.noise_level * rng.uniform_in(-1.0, 1.0);
            }
        }
        Waveform::new(samples, SAMPLE_RATE)
    }
}

/// One generated utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub utt_id: String,
    pub wav_path: PathBuf,
    pub transcript: String,
}

/// A generated corpus: the utterances plus the manifest file that points at
/// them (`utt_id<TAB>wav_path<TAB>transcript` per line).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub manifest_path: PathBuf,
    pub utterances: Vec<SynthUtterance>,
}

/// Draw the transcript of utterance `index` under `spec`. Exposed separately
/// so tests can predict corpus content without touching the filesystem.
pub fn draw_transcript(spec: &SynthSpec, index: usize) -> String {
    let mut rng = DetRng::for_purpose(spec.seed, "synth/transcript", index as u64);
    let len = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
    (0..len).map(|_| spec.vocab[rng.below(spec.vocab.len())]).collect()
}

/// Generate `n` utterances under `dir`, writing one WAV per utterance and a
/// `manifest.tsv`. Manifest wav paths are bare file names, relative to the
/// manifest's own directory, so the corpus can be moved wholesale.
/// Regeneration with the same spec is bit-identical; every utterance derives
/// its own random stream, so order of generation is immaterial.
pub fn generate_corpus(spec: &SynthSpec, n: usize, dir: &Path) -> Result<SynthCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".to_string()));
    }
    std::fs::create_dir_all(dir)?;
    let mut utterances = Vec::with_capacity(n);
    let mut manifest = String::new();
    for i in 0..n {
        let utt_id = format!("synth{i:04}");
        let transcript = draw_transcript(spec, i);
        let mut noise_rng = DetRng::for_purpose(spec.seed, "synth/noise", i as u64);
        let wave = spec.render(&transcript, &mut noise_rng)?;
        let file_name = format!("{utt_id}.wav");
        let wav_path = dir.join(&file_name);
        write_wav(&wav_path, &wave)?;
        manifest.push_str(&format!("{utt_id}\t{file_name}\t{transcript}\n"));
        utterances.push(SynthUtterance { utt_id, wav_path, transcript });
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(SynthCorpus { manifest_path, utterances })
}
