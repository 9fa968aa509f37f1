//! Adaptive SpecAugment: frequency masks of bounded width and time masks
//! whose width bound scales with utterance length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Spectrogram, NUM_MEL};
use crate::error::{Error, Result};
use crate::numerics::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub freq_mask_count: usize,
    pub freq_mask_param: usize,
    pub time_mask_count: usize,
    pub max_time_mask_ratio: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            freq_mask_count: 2,
            freq_mask_param: 27,
            time_mask_count: 10,
            max_time_mask_ratio: 0.05,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            freq_mask_count: 0,
            freq_mask_param: 0,
            time_mask_count: 0,
            max_time_mask_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_time_mask_ratio) {
            return Err(Error::contract(format!(
                "max_time_mask_ratio must lie in [0,1], got {}",
                self.max_time_mask_ratio
            )));
        }
        if self.freq_mask_param > NUM_MEL {
            return Err(Error::contract(format!(
                "freq_mask_param {} exceeds {NUM_MEL} channels",
                self.freq_mask_param
            )));
        }
        Ok(())
    }

    /// Largest time-mask width for an utterance of `frames` frames.
    pub fn max_time_width(&self, frames: usize) -> usize {
        (self.max_time_mask_ratio * frames as f64).floor() as usize
    }
}

/// A half-open `[start, start + width)` masked interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpan {
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AppliedMasks {
    pub freq: Vec<MaskSpan>,
    pub time: Vec<MaskSpan>,
}

fn sample_span<R: Rng>(r: &mut R, max_width: usize, extent: usize) -> MaskSpan {
    let width = r.gen_range(0..=max_width.min(extent));
    let start = r.gen_range(0..=extent - width);
    MaskSpan { start, width }
}

/// Draws the masks for a `frames × 80` input without applying them.
pub fn sample_masks(frames: usize, policy: &AugmentPolicy, seed: u64) -> AppliedMasks {
    let mut r = rng::rng(seed);
    let freq = (0..policy.freq_mask_count)
        .map(|_| sample_span(&mut r, policy.freq_mask_param, NUM_MEL))
        .collect();
    let tmax = policy.max_time_width(frames);
    let time = (0..policy.time_mask_count)
        .map(|_| sample_span(&mut r, tmax, frames))
        .collect();
    AppliedMasks { freq, time }
}

pub fn apply_specaugment_with_masks(
    s: &Spectrogram,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<(Spectrogram, AppliedMasks)> {
    policy.validate()?;
    let t = s.num_frames();
    if t == 0 {
        return Err(Error::contract("empty spectrogram"));
    }
    let masks = sample_masks(t, policy, seed);
    let mut out = s.frames.clone();
    for m in &masks.freq {
        for i in 0..t {
            out.row_mut(i)[m.start..m.start + m.width].fill(0.0);
        }
    }
    for m in &masks.time {
        for i in m.start..m.start + m.width {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok((Spectrogram { frames: out }, masks))
}

pub fn apply_specaugment(s: &Spectrogram, policy: &AugmentPolicy, seed: u64) -> Result<Spectrogram> {
    apply_specaugment_with_masks(s, policy, seed).map(|(s, _)| s)
}
