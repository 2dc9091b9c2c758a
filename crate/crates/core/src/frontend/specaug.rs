//! SpecAugment: random frequency and time masking on feature matrices.

use crate::error::Result;
use crate::frontend::NUM_MELS;
use crate::rng::DetRng;
use crate::tensor::{Scalar, Tensor};

/// Masking policy. Widths are sampled uniformly in `[0, max]` per mask, and
/// each time mask is additionally capped at [`SpecAugmentPolicy::TIME_CAP`]
/// of the utterance length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecAugmentPolicy {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub enabled: bool,
}

impl SpecAugmentPolicy {
    /// Fraction of the utterance length a single time mask may cover.
    pub const TIME_CAP: f64 = 0.2;

    pub fn disabled() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 0,
            max_freq_width: 0,
            num_time_masks: 0,
            max_time_width: 0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_freq_width > NUM_MELS {
            return Err(crate::error::Error::Config(format!(
                "freq mask width {} exceeds {NUM_MELS} mel bins",
                self.max_freq_width
            )));
        }
        Ok(())
    }
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 2,
            max_freq_width: 10,
            num_time_masks: 2,
            max_time_width: 50,
            enabled: true,
        }
    }
}

/// Apply SpecAugment in place. Masked cells become zero, which equals the
/// corpus mean after CMVN. Draw order is fixed (all frequency masks, then
/// all time masks; width before start) so a given generator state yields
/// identical masks on every run.
pub fn spec_augment<T: Scalar>(
    feats: &mut Tensor<T>,
    policy: &SpecAugmentPolicy,
    rng: &mut DetRng,
) -> Result<()> {
    policy.validate()?;
    if !policy.enabled {
        return Ok(());
    }
    let dims = feats.shape().to_vec();
    if dims.len() != 2 || dims[1] != NUM_MELS {
        return Err(crate::error::Error::shape(
            "spec_augment",
            format!("expected [*, {NUM_MELS}] features, got {dims:?}"),
        ));
    }
    let t_len = dims[0];
    for _ in 0..policy.num_freq_masks {
        let width = rng.below(policy.max_freq_width + 1);
        let start = rng.below(NUM_MELS - width + 1);
        for t in 0..t_len {
            for f in start..start + width {
                feats.data_mut()[t * NUM_MELS + f] = T::zero();
            }
        }
    }
    let time_cap = ((t_len as f64 * SpecAugmentPolicy::TIME_CAP).floor() as usize).max(0);
    for _ in 0..policy.num_time_masks {
        let max_w = policy.max_time_width.min(time_cap);
        let width = rng.below(max_w + 1);
        let start = rng.below(t_len - width + 1);
        for t in start..start + width {
            for f in 0..NUM_MELS {
                feats.data_mut()[t * NUM_MELS + f] = T::zero();
            }
        }
    }
    Ok(())
}
