use serde::{Deserialize, Serialize};

use super::ctc::ctc_loss_var;
use super::decode::greedy_decode;
use super::wer::wer;
use crate::audio::{Spectrogram, Vocabulary};
use crate::conformer::layers::init;
use crate::conformer::{encode_features, encoder, subsample, ConformerConfig, Fwd};
use crate::data::{EpochSampler, LabeledUtterance};
use crate::error::{Error, Result};
use crate::metrics::Series;
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Adam, AdamConfig, Checkpoint, EmaState, Gradients, LrSchedule, ParamStore, Tape, Tensor, Var};
use crate::specaugment::{apply_specaugment, AugmentPolicy};

pub const DECODER_PREFIX: &str = "decoder.";
const OUTPUT: &str = "decoder.out";

/// How the model is initialised before CTC training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Scratch,
    EncoderPretrained,
    Full,
}

/// Conformer encoder plus a linear CTC output layer.
#[derive(Clone, Debug)]
pub struct AsrModel {
    pub cfg: ConformerConfig,
    pub params: ParamStore,
    pub ema: Option<EmaState>,
}

fn init_decoder(cfg: &ConformerConfig, store: &mut ParamStore, r: &mut Rng) -> Result<()> {
    init::linear(store, OUTPUT, cfg.model_dim, Vocabulary::new().size(), r)
}

/// Fails unless `ckpt` holds exactly the tensors (names and shapes) of `reference` under `prefix`.
fn check_architecture(reference: &ParamStore, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let expected: Vec<(&str, &[usize])> = reference
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| (p.name.as_str(), p.value.shape()))
        .collect();
    for (name, shape) in &expected {
        match ckpt.param(name) {
            None => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint lacks parameter {name}"
                )))
            }
            Some(t) if t.shape() != *shape => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    t.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    let extra = ckpt
        .params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .find(|(n, _)| !expected.iter().any(|(e, _)| e == n));
    if let Some((n, _)) = extra {
        return Err(Error::Checkpoint(format!("checkpoint parameter {n} not in model")));
    }
    Ok(())
}

impl AsrModel {
    pub fn random(cfg: &ConformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::rng(rng::derive(seed, "asr-init"));
        let mut params = ParamStore::new();
        encoder::init_params(cfg, &mut params, &mut r)?;
        init_decoder(cfg, &mut params, &mut r)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            ema: None,
        })
    }

    /// Builds a model under `mode`. Architecture mismatches are reported before
    /// any parameter is touched.
    pub fn initialise(cfg: &ConformerConfig, mode: InitMode, ckpt: Option<&Checkpoint>, seed: u64) -> Result<Self> {
        let mut model = Self::random(cfg, seed)?;
        match (mode, ckpt) {
            (InitMode::Scratch, _) => {}
            (_, None) => {
                return Err(Error::contract(format!("init mode {mode:?} needs a checkpoint")));
            }
            (InitMode::EncoderPretrained, Some(c)) => {
                check_architecture(&model.params, c, encoder::PREFIX)?;
                model.params.load_matching(&c.params, encoder::PREFIX)?;
            }
            (InitMode::Full, Some(c)) => {
                check_architecture(&model.params, c, encoder::PREFIX)?;
                check_architecture(&model.params, c, DECODER_PREFIX)?;
                model.params.load_matching(&c.params, encoder::PREFIX)?;
                model.params.load_matching(&c.params, DECODER_PREFIX)?;
            }
        }
        Ok(model)
    }

    /// Parameters used for evaluation: the EMA shadow when one is kept.
    pub fn eval_params(&self) -> Result<ParamStore> {
        match &self.ema {
            Some(e) => e.apply_to(&self.params),
            None => Ok(self.params.clone()),
        }
    }

    /// Checkpoint of the evaluation parameters.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(&self.eval_params()?))
    }

    pub fn from_checkpoint(cfg: &ConformerConfig, ckpt: &Checkpoint) -> Result<Self> {
        Self::initialise(cfg, InitMode::Full, Some(ckpt), 0)
    }

    pub fn logits(&self, spec: &Spectrogram) -> Result<Tensor> {
        infer_logits(&self.cfg, &self.eval_params()?, spec)
    }
}

/// Encoder output projected to per-frame vocabulary scores.
pub fn ctc_logits(fwd: &mut Fwd, cfg: &ConformerConfig, spec: &Spectrogram) -> Result<Var> {
    let feats = subsample(fwd, cfg, spec)?;
    let acts = encode_features(fwd, cfg, feats, None)?;
    let out = *acts.last().expect("encoder returns layers");
    fwd.linear(out, OUTPUT)
}

pub fn infer_logits(cfg: &ConformerConfig, params: &ParamStore, spec: &Spectrogram) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, params);
    let v = ctc_logits(&mut fwd, cfg, spec)?;
    Ok(tape.value(v).clone())
}

/// Greedy transcripts for `utts` under `params`.
pub fn transcribe(cfg: &ConformerConfig, params: &ParamStore, utts: &[&Spectrogram]) -> Result<Vec<String>> {
    let vocab = Vocabulary::new();
    utts.iter()
        .map(|s| vocab.decode(&greedy_decode(&infer_logits(cfg, params, s)?)))
        .collect()
}

pub fn evaluate_wer(cfg: &ConformerConfig, params: &ParamStore, utts: &[LabeledUtterance]) -> Result<f64> {
    let specs: Vec<&Spectrogram> = utts.iter().map(|u| &u.features).collect();
    let hyps = transcribe(cfg, params, &specs)?;
    let refs: Vec<&str> = utts.iter().map(|u| u.transcript.as_str()).collect();
    wer(&refs, &hyps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub encoder_schedule: LrSchedule,
    pub decoder_schedule: LrSchedule,
    /// `None` disables input augmentation.
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    /// `None` disables the parameter moving average.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Evaluate every this many steps (and at the last step); 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    pub seed: u64,
}

impl SupervisedConfig {
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
        self.encoder_schedule.validate()?;
        self.decoder_schedule.validate()?;
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return bad("ema_decay", "must lie in (0, 1)");
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", "must be positive");
            }
        }
        Ok(())
    }
}

/// Per-step training loss and periodic evaluation WER.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss: Series,
    pub eval_wer: Series,
    pub skipped_infeasible: u64,
}

/// Mean loss and averaged gradients of a batch of per-example closures.
pub(crate) struct BatchGrads {
    pub loss: f64,
    pub grads: Gradients,
    pub used: usize,
}

pub(crate) fn accumulate<F>(store: &ParamStore, n: usize, mut example: F) -> Result<BatchGrads>
where
    F: FnMut(usize, &mut Tape) -> Result<Option<Var>>,
{
    let mut grads = Gradients::zeros(store);
    let mut loss = 0.0;
    let mut used = 0;
    for j in 0..n {
        let mut tape = Tape::new();
        if let Some(l) = example(j, &mut tape)? {
            loss += tape.value(l).item();
            grads.add_assign(&tape.backward(l, store)?)?;
            used += 1;
        }
    }
    if used > 0 {
        grads.scale(1.0 / used as f64);
        loss /= used as f64;
    }
    Ok(BatchGrads { loss, grads, used })
}

/// CTC training of `model` with separate encoder and decoder optimisers.
pub fn train_supervised(
    model: &mut AsrModel,
    cfg: &SupervisedConfig,
    train: &[LabeledUtterance],
    eval: Option<&[LabeledUtterance]>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut sampler = EpochSampler::new(train.len(), rng::derive(cfg.seed, "supervised-order"))?;
    train_with_batches(model, cfg, train, eval, |_| Ok(sampler.take(cfg.batch_size)))
}

/// As [`train_supervised`], with batches of indices into `pool` supplied per step.
pub fn train_with_batches<B>(
    model: &mut AsrModel,
    cfg: &SupervisedConfig,
    pool: &[LabeledUtterance],
    eval: Option<&[LabeledUtterance]>,
    mut next_batch: B,
) -> Result<TrainLog>
where
    B: FnMut(u64) -> Result<Vec<usize>>,
{
    cfg.validate()?;
    encoder::check_params(&model.cfg, &model.params)?;
    let train = pool;
    let enc_ids = model.params.ids_with_prefix(encoder::PREFIX);
    let dec_ids = model.params.ids_with_prefix(DECODER_PREFIX);
    if dec_ids.is_empty() {
        return Err(Error::contract("model has no decoder parameters"));
    }
    let mut enc_opt = Adam::new(&model.params, enc_ids, AdamConfig::default());
    let mut dec_opt = Adam::new(&model.params, dec_ids, AdamConfig::default());
    let mut ema = match cfg.ema_decay {
        Some(d) => Some(EmaState::from_store(d, &model.params)?),
        None => None,
    };
    let aug_seed = rng::derive(cfg.seed, "supervised-augment");
    let drop_seed = rng::derive(cfg.seed, "supervised-dropout");
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch = next_batch(step)?;
        if let Some(&bad) = batch.iter().find(|&&i| i >= train.len()) {
            return Err(Error::contract(format!("batch index {bad} outside a pool of {}", train.len())));
        }
        let mconf = &model.cfg;
        let store = &model.params;
        let b = accumulate(store, batch.len(), |j, tape| {
            let utt = &train[batch[j]];
            let example = rng::derive_seed(step, j as u64);
            let feats = match &cfg.augment {
                Some(p) => apply_specaugment(&utt.features, p, rng::derive_seed(aug_seed, example))?,
                None => utt.features.clone(),
            };
            let mut r = rng::rng(rng::derive_seed(drop_seed, example));
            let mut fwd = Fwd::train(tape, store, mconf.dropout, &mut r);
            let logits = ctc_logits(&mut fwd, mconf, &feats)?;
            let loss = ctc_loss_var(tape, logits, &utt.target)?;
            if loss.is_none() {
                log::warn!("step {step}: {} cannot be aligned to its transcript, skipped", utt.id);
            }
            Ok(loss)
        })?;
        log.skipped_infeasible += (batch.len() - b.used) as u64;
        if b.used == 0 {
            continue;
        }
        let mut grads = b.grads;
        if !b.loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "supervised step {step}: loss {} gradient norm {}",
                b.loss,
                grads.global_norm()
            )));
        }
        if let Some(c) = cfg.grad_clip {
            grads.clip_global_norm(c);
        }
        enc_opt.step(&mut model.params, &grads, cfg.encoder_schedule.lr_at(step)?)?;
        dec_opt.step(&mut model.params, &grads, cfg.decoder_schedule.lr_at(step)?)?;
        if let Some(e) = ema.as_mut() {
            e.update_from_store(&model.params)?;
        }
        log.loss.push(step, b.loss)?;
        let due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if let (true, Some(ev)) = (due, eval) {
            let params = match &ema {
                Some(e) => e.apply_to(&model.params)?,
                None => model.params.clone(),
            };
            let w = evaluate_wer(&model.cfg, &params, ev)?;
            log::info!("step {step}: loss {:.4} eval WER {:.4}", b.loss, w);
            log.eval_wer.push(step, w)?;
        }
    }
    model.ema = ema;
    Ok(log)
}
