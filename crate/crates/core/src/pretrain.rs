//! Masked contrastive pre-training of the encoder against linear-projection targets.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::asr::train::accumulate;
use crate::audio::Spectrogram;
use crate::conformer::layers::init;
use crate::conformer::{encode_features, encoder, subsample, ConformerConfig, Fwd};
use crate::data::EpochSampler;
use crate::error::{Error, Result};
use crate::metrics::Series;
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Adam, AdamConfig, Checkpoint, EmaState, LrSchedule, ParamStore, Tape, Tensor, Var};

pub const MASK_EMBEDDING: &str = "pretrain.mask_embedding";
const TARGET_PROJ: &str = "pretrain.target_proj";

/// Span starts and the positions they cover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub span_starts: Vec<usize>,
    pub span_length: usize,
    pub covered: Vec<bool>,
}

impl MaskSpec {
    /// Coverage of spans `[s, s + span_length)` clipped to `frames`.
    pub fn from_starts(frames: usize, span_starts: Vec<usize>, span_length: usize) -> Result<Self> {
        let mut covered = vec![false; frames];
        for &s in &span_starts {
            if s >= frames {
                return Err(Error::contract(format!("span start {s} outside {frames} frames")));
            }
            for c in covered.iter_mut().skip(s).take(span_length) {
                *c = true;
            }
        }
        Ok(Self {
            span_starts,
            span_length,
            covered,
        })
    }

    pub fn frames(&self) -> usize {
        self.covered.len()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.covered.len()).filter(|&i| self.covered[i]).collect()
    }

    pub fn num_covered(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

/// Each position starts a span with probability `start_prob`; one uniform start
/// is forced when none is drawn.
pub fn sample_masks(frames: usize, start_prob: f64, span_length: usize, seed: u64) -> Result<MaskSpec> {
    if frames == 0 {
        return Err(Error::contract("cannot mask an empty sequence"));
    }
    if !(0.0..=1.0).contains(&start_prob) || span_length == 0 {
        return Err(Error::contract(format!(
            "invalid mask settings: start_prob {start_prob}, span {span_length}"
        )));
    }
    let mut r = rng::rng(seed);
    let mut starts: Vec<usize> = (0..frames).filter(|_| r.gen::<f64>() < start_prob).collect();
    if starts.is_empty() {
        starts.push(r.gen_range(0..frames));
    }
    MaskSpec::from_starts(frames, starts, span_length)
}

/// Contexts at masked positions and their candidate targets, for the plain-tensor loss.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    /// One row per masked position.
    pub context: Tensor,
    /// True target for each context row.
    pub targets: Tensor,
    /// `negatives[m]` is a `K × d` matrix of distractors for row `m`.
    pub negatives: Vec<Tensor>,
    pub temperature: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine similarity of a zero-norm vector"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean over anchors of `−log softmax(cos/κ)` at the true target.
pub fn contrastive_loss(b: &ContrastiveBatch) -> Result<f64> {
    let m = b.context.rows();
    if m == 0 || b.targets.shape() != b.context.shape() || b.negatives.len() != m {
        return Err(Error::shape("contrastive batch sizes disagree"));
    }
    if !(b.temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    if !b.context.is_finite() || !b.targets.is_finite() || b.negatives.iter().any(|n| !n.is_finite()) {
        return Err(Error::NonFinite("contrastive inputs".into()));
    }
    let mut total = 0.0;
    for i in 0..m {
        let neg = &b.negatives[i];
        if neg.rows() == 0 || neg.cols() != b.context.cols() {
            return Err(Error::shape(format!("anchor {i} needs K >= 1 negatives of matching dim")));
        }
        let c = b.context.row(i);
        let pos = cosine(c, b.targets.row(i))? / b.temperature;
        let mut logits = vec![pos];
        for k in 0..neg.rows() {
            logits.push(cosine(c, neg.row(k))? / b.temperature);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        total += lse - pos;
    }
    Ok(total / m as f64)
}

/// `negatives[m]` draws `k` positions with replacement from the other masked
/// positions, or from all other positions when `anchor` is the only one masked.
pub fn sample_negatives(masked: &[usize], frames: usize, k: usize, r: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if frames < 2 {
        return Err(Error::contract("negatives need at least two frames"));
    }
    let all: Vec<usize> = (0..frames).collect();
    masked
        .iter()
        .map(|&a| {
            let pool: Vec<usize> = masked.iter().copied().filter(|&p| p != a).collect();
            let pool = if pool.is_empty() {
                all.iter().copied().filter(|&p| p != a).collect()
            } else {
                pool
            };
            Ok((0..k).map(|_| pool[r.gen_range(0..pool.len())]).collect())
        })
        .collect()
}

/// Contrastive loss on the tape: `context` rows at `anchors` against rows of
/// `targets` at the anchor (positive) and `negatives`.
pub fn contrastive_loss_var(
    tape: &mut Tape,
    context: Var,
    targets: Var,
    anchors: &[usize],
    negatives: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    if anchors.is_empty() || anchors.len() != negatives.len() {
        return Err(Error::contract("need one negative list per anchor"));
    }
    let k = negatives[0].len();
    if k == 0 || negatives.iter().any(|n| n.len() != k) {
        return Err(Error::contract("every anchor needs the same K >= 1 negatives"));
    }
    let frames = tape.shape(targets)[0];
    let c = tape.select_rows(context, anchors)?;
    let c = tape.l2_normalize_rows(c)?;
    let q = tape.l2_normalize_rows(targets)?;
    let sims = tape.matmul_t(c, q)?;
    let sims = tape.scale(sims, 1.0 / temperature);
    let mut index = Vec::with_capacity(anchors.len() * (k + 1));
    for (m, (&a, negs)) in anchors.iter().zip(negatives).enumerate() {
        index.push(m * frames + a);
        index.extend(negs.iter().map(|&n| m * frames + n));
    }
    let cand = tape.gather(sims, index, vec![anchors.len(), k + 1])?;
    let logp = tape.log_softmax_rows(cand)?;
    let pos_index = (0..anchors.len()).map(|m| m * (k + 1)).collect();
    let pos = tape.gather(logp, pos_index, vec![anchors.len()])?;
    let mean = tape.mean(pos);
    Ok(tape.scale(mean, -1.0))
}

/// Encoder plus the mask embedding and target projection.
pub fn init_params(cfg: &ConformerConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut r = rng::rng(rng::derive(seed, "pretrain-init"));
    let mut store = ParamStore::new();
    encoder::init_params(cfg, &mut store, &mut r)?;
    store.insert(MASK_EMBEDDING, Tensor::uniform(&[cfg.model_dim], 1.0, &mut r))?;
    init::linear(&mut store, TARGET_PROJ, cfg.model_dim, cfg.model_dim, &mut r)?;
    Ok(store)
}

/// Encoder outputs after replacing covered positions with the mask embedding.
pub fn masked_forward(fwd: &mut Fwd, cfg: &ConformerConfig, features: Var, mask: &MaskSpec) -> Result<Var> {
    let frames = fwd.tape.shape(features)[0];
    if mask.frames() != frames {
        return Err(Error::shape(format!(
            "mask covers {} frames, features have {frames}",
            mask.frames()
        )));
    }
    let emb = fwd.p(MASK_EMBEDDING)?;
    let acts = encode_features(fwd, cfg, features, Some((&mask.covered, emb)))?;
    Ok(*acts.last().expect("encoder returns layers"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default = "default_start_prob")]
    pub mask_start_prob: f64,
    #[serde(default = "default_span")]
    pub mask_span: usize,
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Treat targets as constants instead of back-propagating into them.
    #[serde(default)]
    pub stop_target_grad: bool,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

fn default_start_prob() -> f64 {
    0.065
}
fn default_span() -> usize {
    10
}
fn default_negatives() -> usize {
    8
}
fn default_temperature() -> f64 {
    0.1
}

impl PretrainConfig {
    pub fn new(steps: u64, batch_size: usize, schedule: LrSchedule, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            schedule,
            mask_start_prob: default_start_prob(),
            mask_span: default_span(),
            negatives: default_negatives(),
            temperature: default_temperature(),
            stop_target_grad: false,
            ema_decay: None,
            grad_clip: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.mask_start_prob) {
            return bad("mask_start_prob", "must lie in [0, 1]");
        }
        if self.mask_span == 0 {
            return bad("mask_span", "must be >= 1");
        }
        if self.negatives == 0 {
            return bad("negatives", "must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be positive");
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return bad("ema_decay", "must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// Pre-training state: all parameters plus an optional moving average.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub cfg: ConformerConfig,
    pub params: ParamStore,
    pub ema: Option<EmaState>,
}

impl PretrainModel {
    pub fn new(cfg: &ConformerConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            params: init_params(cfg, seed)?,
            ema: None,
        })
    }

    pub fn eval_params(&self) -> Result<ParamStore> {
        match &self.ema {
            Some(e) => e.apply_to(&self.params),
            None => Ok(self.params.clone()),
        }
    }

    /// Encoder weights only, flagged for downstream fine-tuning.
    pub fn export_encoder(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::encoder_only(&self.eval_params()?, encoder::PREFIX))
    }
}

/// Contrastive loss of one utterance, `None` when it is too short to draw negatives.
pub fn utterance_loss(
    tape: &mut Tape,
    fwd_store: &ParamStore,
    cfg: &ConformerConfig,
    pcfg: &PretrainConfig,
    spec: &Spectrogram,
    seed: u64,
    dropout: Option<&mut Rng>,
) -> Result<Option<Var>> {
    let mut fwd = match dropout {
        Some(r) => Fwd::train(tape, fwd_store, cfg.dropout, r),
        None => Fwd::eval(tape, fwd_store),
    };
    let feats = subsample(&mut fwd, cfg, spec)?;
    let frames = fwd.tape.shape(feats)[0];
    if frames < 2 {
        return Ok(None);
    }
    let mask = sample_masks(frames, pcfg.mask_start_prob, pcfg.mask_span, rng::derive(seed, "mask"))?;
    let context = masked_forward(&mut fwd, cfg, feats, &mask)?;
    let target_in = if pcfg.stop_target_grad {
        let v = fwd.tape.value(feats).clone();
        fwd.constant(v)
    } else {
        feats
    };
    let targets = fwd.linear(target_in, TARGET_PROJ)?;
    let anchors = mask.positions();
    let mut r = rng::rng(rng::derive(seed, "negatives"));
    let negs = sample_negatives(&anchors, frames, pcfg.negatives, &mut r)?;
    contrastive_loss_var(tape, context, targets, &anchors, &negs, pcfg.temperature).map(Some)
}

/// Runs `cfg.steps` optimisation steps on `data`; returns the per-step mean loss.
pub fn pretrain(model: &mut PretrainModel, cfg: &PretrainConfig, data: &[Spectrogram]) -> Result<Series> {
    cfg.validate()?;
    let mut sampler = EpochSampler::new(data.len(), rng::derive(cfg.seed, "pretrain-order"))?;
    let ids: Vec<_> = model.params.ids().collect();
    let mut opt = Adam::new(&model.params, ids, AdamConfig::default());
    let mut ema = match cfg.ema_decay {
        Some(d) => Some(EmaState::from_store(d, &model.params)?),
        None => None,
    };
    let example_seed = rng::derive(cfg.seed, "pretrain-example");
    let mut curve = Series::new();
    for step in 1..=cfg.steps {
        let batch = sampler.take(cfg.batch_size);
        let store = &model.params;
        let mcfg = &model.cfg;
        let b = accumulate(store, batch.len(), |j, tape| {
            let seed = rng::derive_seed(example_seed, step * cfg.batch_size as u64 + j as u64);
            let mut r = rng::rng(rng::derive(seed, "dropout"));
            utterance_loss(tape, store, mcfg, cfg, &data[batch[j]], seed, Some(&mut r))
        })?;
        if b.used == 0 {
            return Err(Error::contract(format!(
                "pre-training step {step}: every utterance in the batch is shorter than two encoder frames"
            )));
        }
        let mut grads = b.grads;
        if !b.loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "pre-training step {step}: loss {} gradient norm {}",
                b.loss,
                grads.global_norm()
            )));
        }
        if let Some(c) = cfg.grad_clip {
            grads.clip_global_norm(c);
        }
        opt.step(&mut model.params, &grads, cfg.schedule.lr_at(step)?)?;
        if let Some(e) = ema.as_mut() {
            e.update_from_store(&model.params)?;
        }
        curve.push(step, b.loss)?;
        log::debug!("pretrain step {step}: loss {:.4}", b.loss);
    }
    model.ema = ema;
    Ok(curve)
}
