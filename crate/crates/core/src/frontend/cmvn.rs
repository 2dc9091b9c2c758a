//! Corpus-global cepstral mean and variance normalization.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::NUM_MELS;
use crate::tensor::{Scalar, Tensor};

/// Variances are floored here so normalization never divides by zero.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Population mean/variance per feature dimension over a whole corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CmvnStats {
    mean: Vec<f64>,
    variance: Vec<f64>,
    frame_count: u64,
}

impl CmvnStats {
    /// Identity statistics: mean 0, variance 1. Normalizing with these
    /// leaves features unchanged.
    pub fn identity() -> Self {
        CmvnStats {
            mean: vec![0.0; NUM_MELS],
            variance: vec![1.0; NUM_MELS],
            frame_count: 0,
        }
    }

    /// Fit population statistics over all frames of all utterances.
    pub fn fit<T: Scalar>(corpus: &[Tensor<T>]) -> Result<Self> {
        let mut sum = vec![0.0f64; NUM_MELS];
        let mut sumsq = vec![0.0f64; NUM_MELS];
        let mut count = 0u64;
        for feats in corpus {
            let dims = feats.shape();
            if dims.len() != 2 || dims[1] != NUM_MELS {
                return Err(Error::shape(
                    "cmvn_fit",
                    format!("expected [*, {NUM_MELS}] features, got {dims:?}"),
                ));
            }
            for row in 0..dims[0] {
                for d in 0..NUM_MELS {
                    let v = feats.data()[row * NUM_MELS + d].to_f64();
                    sum[d] += v;
                    sumsq[d] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Audio("CMVN fit over an empty corpus".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let variance: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(VARIANCE_FLOOR))
            .collect();
        Ok(CmvnStats { mean, variance, frame_count: count })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_count
    }

    /// `(x - mean) / sqrt(variance)` per dimension.
    pub fn apply<T: Scalar>(&self, feats: &Tensor<T>) -> Result<Tensor<T>> {
        self.transform(feats, false)
    }

    /// Inverse of [`CmvnStats::apply`].
    pub fn unapply<T: Scalar>(&self, feats: &Tensor<T>) -> Result<Tensor<T>> {
        self.transform(feats, true)
    }

    fn transform<T: Scalar>(&self, feats: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
        let dims = feats.shape();
        if dims.len() != 2 || dims[1] != NUM_MELS {
            return Err(Error::shape(
                "cmvn_apply",
                format!("expected [*, {NUM_MELS}] features, got {dims:?}"),
            ));
        }
        let scale: Vec<f64> = self.variance.iter().map(|v| v.sqrt()).collect();
        let data = feats
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let d = i % NUM_MELS;
                let v = if inverse {
                    x.to_f64() * scale[d] + self.mean[d]
                } else {
                    (x.to_f64() - self.mean[d]) / scale[d]
                };
                T::from_f64(v)
            })
            .collect();
        Ok(Tensor::new(dims.to_vec(), data))
    }

    /// Persist as text: 80 means, 80 variances, then the frame count, one
    /// value per line (161 lines). Floats use the shortest representation
    /// that parses back to the same bits, so the round trip is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in self.mean.iter().chain(&self.variance) {
            out.push_str(&format!("{v:?}\n"));
        }
        out.push_str(&format!("{}\n", self.frame_count));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Inverse of [`CmvnStats::to_text`]; `origin` labels error messages.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != 2 * NUM_MELS + 1 {
            return Err(Error::Audio(format!(
                "{origin}: expected {} lines of CMVN stats, got {}",
                2 * NUM_MELS + 1,
                lines.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Audio(format!("{origin}: bad number {s:?}")))
        };
        let mut mean = Vec::with_capacity(NUM_MELS);
        let mut variance = Vec::with_capacity(NUM_MELS);
        for line in &lines[..NUM_MELS] {
            mean.push(parse(line)?);
        }
        for line in &lines[NUM_MELS..2 * NUM_MELS] {
            let v = parse(line)?;
            if v <= 0.0 {
                return Err(Error::Audio(format!("{origin}: non-positive variance {v}")));
            }
            variance.push(v);
        }
        let frame_count = lines[2 * NUM_MELS]
            .trim()
            .parse()
            .map_err(|_| Error::Audio(format!("{origin}: bad frame count")))?;
        Ok(CmvnStats { mean, variance, frame_count })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        Self::from_text(&content, &path.display().to_string())
    }
}
