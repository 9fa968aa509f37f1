use serde::{Deserialize, Serialize};

use super::map::{mean_average_precision, MapReport};
use crate::conformer::layers::init;
use crate::conformer::Fwd;
use crate::data::EpochSampler;
use crate::error::{Error, Result};
use crate::metrics::Series;
use crate::numerics::{rng, Adam, AdamConfig, ParamStore, Tape, Tensor, Var};

pub const HIDDEN: &str = "head.hidden";
pub const OUTPUT: &str = "head.out";

/// One clip of per-frame features with clip-level binary targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    pub id: String,
    /// `[frames, dim]`.
    pub frames: Tensor,
    pub targets: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_units: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_units: 512,
            epochs: 50,
            learning_rate: 1e-3,
        }
    }
}

/// Frame-level classifier: one ReLU hidden layer, independent sigmoid outputs.
#[derive(Clone, Debug)]
pub struct MultiLabelHead {
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: ParamStore,
}

impl MultiLabelHead {
    pub fn new(input_dim: usize, hidden_units: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::contract("multi-label head needs at least one class"));
        }
        if input_dim == 0 || hidden_units == 0 {
            return Err(Error::contract("multi-label head needs non-zero input and hidden sizes"));
        }
        let mut params = ParamStore::new();
        let mut r = rng::rng(seed);
        init::linear(&mut params, HIDDEN, input_dim, hidden_units, &mut r)?;
        init::linear(&mut params, OUTPUT, hidden_units, num_classes, &mut r)?;
        Ok(Self {
            input_dim,
            num_classes,
            params,
        })
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.ndim() != 2 || frames.cols() != self.input_dim || frames.rows() == 0 {
            return Err(Error::shape(format!(
                "head expects [frames>0, {}], got {:?}",
                self.input_dim,
                frames.shape()
            )));
        }
        Ok(())
    }

    /// Per-frame logits `[frames, C]` on `tape` using parameters from `store`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, frames: &Tensor) -> Result<Var> {
        self.check_frames(frames)?;
        let mut fwd = Fwd::eval(tape, store);
        let x = fwd.constant(frames.clone());
        let h = fwd.linear(x, HIDDEN)?;
        let h = fwd.tape.relu(h);
        fwd.linear(h, OUTPUT)
    }

    /// Mean per-class binary cross-entropy with clip targets broadcast to frames.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, clip: &FrameClip) -> Result<Var> {
        if clip.targets.len() != self.num_classes {
            return Err(Error::shape(format!(
                "clip {} has {} targets, head has {} classes",
                clip.id,
                clip.targets.len(),
                self.num_classes
            )));
        }
        let logits = self.logits(tape, store, &clip.frames)?;
        let row: Vec<f64> = clip.targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let targets = Tensor::matrix(
            clip.frames.rows(),
            self.num_classes,
            row.iter().cycle().take(clip.frames.rows() * self.num_classes).copied().collect(),
        )?;
        tape.bce_with_logits(logits, &targets)
    }

    /// Per-frame probabilities `[frames, C]`, each in (0, 1).
    pub fn probabilities(&self, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, &self.params, frames)?;
        Ok(tape.value(l).map(|z| 1.0 / (1.0 + (-z).exp())))
    }

    /// Clip score per class: the mean of frame probabilities.
    pub fn clip_scores(&self, frames: &Tensor) -> Result<Vec<f64>> {
        Ok(self.probabilities(frames)?.mean_rows())
    }
}

/// Trains a fresh head with per-clip Adam steps over shuffled epochs. The
/// returned series holds the mean frame-level loss of each epoch.
pub fn train_mlp_head(
    clips: &[FrameClip],
    num_classes: usize,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<(MultiLabelHead, Series)> {
    let first = clips.first().ok_or_else(|| Error::contract("no training clips"))?;
    let mut head = MultiLabelHead::new(first.frames.cols(), cfg.hidden_units, num_classes, seed)?;
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config {
            field: "learning_rate".into(),
            message: "must be positive".into(),
        });
    }
    let ids: Vec<_> = head.params.ids().collect();
    let mut adam = Adam::new(&head.params, ids, AdamConfig::default());
    let mut sampler = EpochSampler::new(clips.len(), rng::derive(seed, "head-order"))?;
    let mut curve = Series::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..clips.len() {
            let clip = &clips[sampler.next_index()];
            let mut tape = Tape::new();
            let loss = head.loss(&mut tape, &head.params, clip)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("head loss on clip {}", clip.id)));
            }
            total += value;
            let grads = tape.backward(loss, &head.params)?;
            adam.step(&mut head.params, &grads, cfg.learning_rate)?;
        }
        curve.push(epoch as u64 + 1, total / clips.len() as f64)?;
    }
    Ok((head, curve))
}

/// Mean frame-level loss of `head` over `clips`.
pub fn mean_frame_loss(head: &MultiLabelHead, clips: &[FrameClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::contract("no clips"));
    }
    let mut total = 0.0;
    for clip in clips {
        let mut tape = Tape::new();
        let l = head.loss(&mut tape, &head.params, clip)?;
        total += tape.value(l).item();
    }
    Ok(total / clips.len() as f64)
}

/// mAP of mean-pooled clip scores.
pub fn eval_map(head: &MultiLabelHead, clips: &[FrameClip]) -> Result<MapReport> {
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    let scores = clips
        .iter()
        .map(|c| head.clip_scores(&c.frames))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = clips.iter().map(|c| c.targets.clone()).collect();
    mean_average_precision(&ids, &scores, &labels)
}
