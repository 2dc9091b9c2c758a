//! Log-Mel filterbank feature extraction.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::frontend::{Waveform, FFT_SIZE, FRAME_LEN, FRAME_SHIFT, LOG_FLOOR, NUM_MELS};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Number of frames for `n` samples, or `None` below one window.
pub fn num_frames(n: usize) -> Option<usize> {
    if n < FRAME_LEN {
        None
    } else {
        Some(1 + (n - FRAME_LEN) / FRAME_SHIFT)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 80 triangular Mel filters over 0–8 kHz.
pub fn mel_filter_centers_hz() -> Vec<f64> {
    let hi = hz_to_mel(8000.0);
    (1..=NUM_MELS)
        .map(|m| mel_to_hz(hi * m as f64 / (NUM_MELS + 1) as f64))
        .collect()
}

/// Triangular filters as (first FFT bin, weights per consecutive bin).
/// Weights are triangles in the Mel domain evaluated at bin frequencies.
fn build_filterbank() -> Vec<(usize, Vec<f64>)> {
    let n_bins = FFT_SIZE / 2 + 1;
    let bin_hz = 16000.0 / FFT_SIZE as f64;
    let hi = hz_to_mel(8000.0);
    let edge = |i: usize| hi * i as f64 / (NUM_MELS + 1) as f64;
    let mut filters = Vec::with_capacity(NUM_MELS);
    for m in 1..=NUM_MELS {
        let (lo_m, c_m, hi_m) = (edge(m - 1), edge(m), edge(m + 1));
        let mut first = None;
        let mut weights = Vec::new();
        for k in 0..n_bins {
            let mel = hz_to_mel(k as f64 * bin_hz);
            let w = if mel <= lo_m || mel >= hi_m {
                0.0
            } else if mel <= c_m {
                (mel - lo_m) / (c_m - lo_m)
            } else {
                (hi_m - mel) / (hi_m - c_m)
            };
            if w > 0.0 {
                if first.is_none() {
                    first = Some(k);
                }
                weights.push(w);
            } else if first.is_some() {
                break;
            }
        }
        filters.push((first.unwrap_or(0), weights));
    }
    filters
}

fn hamming_window() -> Vec<f64> {
    (0..FRAME_LEN)
        .map(|n| {
            0.54 - 0.46
                * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos()
        })
        .collect()
}

/// Compute `[T, 80]` log-Mel filterbank features.
///
/// Each 25 ms frame is Hamming-windowed, zero-padded to 512 points, and
/// transformed; the power spectrum is pooled through 80 triangular Mel
/// filters spanning 0–8 kHz and floored-logged.
pub fn compute_fbank<T: Scalar>(w: &Waveform) -> Result<Tensor<T>> {
    let samples = w.samples();
    let Some(t_frames) = num_frames(samples.len()) else {
        return Err(Error::Audio(format!(
            "audio shorter than one window ({} < {FRAME_LEN} samples)",
            samples.len()
        )));
    };
    let window = hamming_window();
    let filters = build_filterbank();
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(FFT_SIZE);

    let mut out = vec![T::zero(); t_frames * NUM_MELS];
    par::for_each_chunk_mut(&mut out, NUM_MELS, |frame, row| {
        let start = frame * FRAME_SHIFT;
        let mut buf = vec![Complex::new(0.0f64, 0.0); FFT_SIZE];
        for i in 0..FRAME_LEN {
            buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let n_bins = FFT_SIZE / 2 + 1;
        let mut power = vec![0.0f64; n_bins];
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, (first, weights)) in filters.iter().enumerate() {
            let mut e = 0.0f64;
            for (i, &wgt) in weights.iter().enumerate() {
                e += wgt * power[first + i];
            }
            row[m] = T::from_f64((e + LOG_FLOOR).ln());
        }
    });
    Ok(Tensor::new(vec![t_frames, NUM_MELS], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::SAMPLE_RATE;

    fn sine(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        let f: Tensor<f32> = compute_fbank(&w).unwrap();
        assert_eq!(f.shape(), &[98, 80]);
    }

    #[test]
    fn frame_count_formula_across_lengths() {
        assert_eq!(num_frames(399), None);
        assert_eq!(num_frames(400), Some(1));
        assert_eq!(num_frames(559), Some(1));
        assert_eq!(num_frames(560), Some(2));
        assert_eq!(num_frames(16000), Some(98));
        for n in (400..5000).step_by(37) {
            let t = num_frames(n).unwrap();
            assert!(n >= FRAME_LEN + (t - 1) * FRAME_SHIFT);
            assert!(n < FRAME_LEN + t * FRAME_SHIFT);
        }
    }

    #[test]
    fn too_short_audio_is_an_explicit_error() {
        let w = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        let err = compute_fbank::<f32>(&w).unwrap_err().to_string();
        assert!(err.contains("shorter than one window"), "{err}");
    }

    #[test]
    fn all_zero_waveform_gives_identical_floor_frames() {
        let w = Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        let f: Tensor<f64> = compute_fbank(&w).unwrap();
        let floor = LOG_FLOOR.ln();
        let first = &f.data()[..80];
        for v in f.data() {
            assert!((v - floor).abs() < 1e-12);
        }
        for t in 1..98 {
            assert_eq!(&f.data()[t * 80..(t + 1) * 80], first);
        }
    }

    #[test]
    fn pure_tone_peaks_in_nearest_mel_filter() {
        // Independent geometry oracle: nearest filter center to 440 Hz from
        // the Mel spacing formulas.
        let centers = mel_filter_centers_hz();
        let target = centers
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - 440.0).abs().partial_cmp(&(*b - 440.0).abs()).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        let w = sine(440.0, 1.0, 0.5);
        let f: Tensor<f64> = compute_fbank(&w).unwrap();
        for t in 0..f.shape()[0] {
            let row = &f.data()[t * 80..(t + 1) * 80];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            assert_eq!(argmax, target, "frame {t}");
        }
    }
}
