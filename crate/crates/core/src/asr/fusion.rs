use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::decode::{beam_decode_fused, FusionParams};
use super::lm::CharNgramLm;
use super::wer::wer;
use crate::audio::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::rng;
use crate::numerics::Tensor;

/// Encoder output for one dev utterance together with its reference.
#[derive(Clone, Debug)]
pub struct DevLogits {
    pub logits: Tensor,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrial {
    pub params: FusionParams,
    pub dev_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSearch {
    pub best: FusionParams,
    pub best_dev_wer: f64,
    pub trials: Vec<FusionTrial>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSearchConfig {
    pub trials: usize,
    pub beam_width: usize,
    /// Replace the first random draw with the no-fusion pair (0, 0).
    #[serde(default = "default_true")]
    pub include_baseline: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

pub fn decode_dev(dev: &[DevLogits], lm: &CharNgramLm, fp: &FusionParams) -> Result<Vec<String>> {
    let vocab = Vocabulary::new();
    dev.iter()
        .map(|d| vocab.decode(&beam_decode_fused(&d.logits, lm, fp)?))
        .collect()
}

pub fn dev_wer(dev: &[DevLogits], lm: &CharNgramLm, fp: &FusionParams) -> Result<f64> {
    let hyps = decode_dev(dev, lm, fp)?;
    let refs: Vec<&str> = dev.iter().map(|d| d.reference.as_str()).collect();
    wer(&refs, &hyps)
}

/// Random search over (λ, β) ∈ [0,1]×[−1,1]; the first trial wins ties.
pub fn tune_fusion(dev: &[DevLogits], lm: &CharNgramLm, cfg: &FusionSearchConfig) -> Result<FusionSearch> {
    if dev.is_empty() {
        return Err(Error::contract("fusion tuning needs a non-empty dev set"));
    }
    if cfg.trials == 0 {
        return Err(Error::contract("fusion tuning needs at least one trial"));
    }
    let mut r = rng::rng(rng::derive(cfg.seed, "fusion-search"));
    let mut trials = Vec::with_capacity(cfg.trials);
    for i in 0..cfg.trials {
        let (lambda, beta) = if i == 0 && cfg.include_baseline {
            (0.0, 0.0)
        } else {
            (r.gen_range(0.0..=1.0), r.gen_range(-1.0..=1.0))
        };
        let params = FusionParams::new(lambda, beta, cfg.beam_width);
        let w = dev_wer(dev, lm, &params)?;
        log::debug!("fusion trial {i}: lambda={lambda:.4} beta={beta:.4} wer={w:.4}");
        trials.push(FusionTrial { params, dev_wer: w });
    }
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.dev_wer < trials[best].dev_wer {
            best = i;
        }
    }
    Ok(FusionSearch {
        best: trials[best].params,
        best_dev_wer: trials[best].dev_wer,
        trials,
    })
}
