//! Audio frontend: waveform ingestion, 80-dimensional log-Mel filterbank
//! features, corpus-global CMVN, and SpecAugment.
//!
//! Frontend choices the source material leaves open are fixed here so
//! features are comparable across runs: symmetric Hamming window, 512-point
//! FFT, Mel filters spanning 0–8 kHz, log floor 1e-10, no pre-emphasis, no
//! dithering.

pub mod cmvn;
pub mod fbank;
pub mod specaug;
pub mod wav;

pub use cmvn::CmvnStats;
pub use fbank::{compute_fbank, num_frames};
pub use specaug::{spec_augment, SpecAugmentPolicy};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16000;
/// 25 ms window at 16 kHz.
pub const FRAME_LEN: usize = 400;
/// 10 ms shift at 16 kHz.
pub const FRAME_SHIFT: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MELS: usize = 80;
/// Added to filterbank energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono PCM audio in `[-1, 1]` at the required sample rate.
#[derive(Clone, Debug)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "expected {SAMPLE_RATE} Hz, got {sample_rate} Hz (no implicit resampling)"
            )));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
