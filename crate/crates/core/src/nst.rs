//! Noisy student training: pseudo-labelling, confidence filtering, batch mixing
//! and the generation loop.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::asr::{
    ctc_loss, evaluate_wer, greedy_decode, infer_logits, train_with_batches, AsrModel, InitMode, SupervisedConfig,
    TrainLog,
};
use crate::audio::{word_count, TokenSequence, Vocabulary};
use crate::data::{EpochSampler, LabeledUtterance, Utterance};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numerics::{rng, Checkpoint};

/// Teacher transcript of one unlabeled utterance with its confidence score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledUtterance {
    pub id: String,
    pub hypothesis: TokenSequence,
    pub text: String,
    /// Teacher CTC loss on its own hypothesis divided by max(1, words); lower is more confident.
    pub loss_per_word: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NstConfig {
    pub keep_fraction: f64,
    pub nst_ratio: f64,
    #[serde(default = "default_generations")]
    pub generations: usize,
    /// Use each generation's student as the next generation's teacher.
    #[serde(default = "default_true")]
    pub promote_student: bool,
}

fn default_generations() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl NstConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.keep_fraction != 0.5 && self.keep_fraction != 1.0 {
            return bad("keep_fraction", format!("{} is neither 0.5 nor 1.0", self.keep_fraction));
        }
        if !(0.0..=1.0).contains(&self.nst_ratio) {
            return bad("nst_ratio", format!("{} is outside [0, 1]", self.nst_ratio));
        }
        if self.generations == 0 {
            return bad("generations", "must be >= 1".into());
        }
        Ok(())
    }
}

/// Greedy teacher transcripts with confidence-per-word scores.
pub fn pseudo_label(teacher: &AsrModel, unlabeled: &[Utterance]) -> Result<Vec<PseudoLabeledUtterance>> {
    let params = teacher.eval_params()?;
    let vocab = Vocabulary::new();
    unlabeled
        .iter()
        .map(|u| {
            let logits = infer_logits(&teacher.cfg, &params, &u.features)?;
            let hypothesis = greedy_decode(&logits);
            let text = vocab.decode(&hypothesis)?;
            let loss = ctc_loss(&logits, &hypothesis)?.loss;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("teacher loss on {}", u.id)));
            }
            Ok(PseudoLabeledUtterance {
                id: u.id.clone(),
                loss_per_word: loss / word_count(&text).max(1) as f64,
                hypothesis,
                text,
            })
        })
        .collect()
}

/// The `ceil(keep_fraction · N)` most confident items, ordered by
/// (loss_per_word, id).
pub fn filter_by_confidence(
    items: &[PseudoLabeledUtterance],
    keep_fraction: f64,
) -> Result<Vec<PseudoLabeledUtterance>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::contract(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.loss_per_word.total_cmp(&b.loss_per_word).then_with(|| a.id.cmp(&b.id)));
    let keep = (keep_fraction * items.len() as f64).ceil() as usize;
    sorted.truncate(keep);
    Ok(sorted)
}

/// One training batch: indices into the labeled and pseudo-labeled pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub labeled: Vec<usize>,
    pub pseudo: Vec<usize>,
}

/// Number of pseudo-labeled examples per batch.
pub fn pseudo_quota(nst_ratio: f64, batch_size: usize) -> usize {
    (nst_ratio * batch_size as f64).round() as usize
}

/// Endless stream of batches with a fixed pseudo/labeled composition; each
/// source is reshuffled every epoch and recycles independently.
#[derive(Clone, Debug)]
pub struct BatchMixer {
    labeled: Option<EpochSampler>,
    pseudo: Option<EpochSampler>,
    pseudo_quota: usize,
    labeled_quota: usize,
}

impl BatchMixer {
    pub fn new(num_labeled: usize, num_pseudo: usize, nst_ratio: f64, batch_size: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&nst_ratio) {
            return Err(Error::contract(format!("nst_ratio {nst_ratio} outside [0, 1]")));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        let pseudo_quota = pseudo_quota(nst_ratio, batch_size);
        let labeled_quota = batch_size - pseudo_quota;
        let stream = |n: usize, quota: usize, name: &str| -> Result<Option<EpochSampler>> {
            if quota == 0 {
                return Ok(None);
            }
            if n == 0 {
                return Err(Error::contract(format!(
                    "{name} stream is empty but each batch needs {quota} of its examples"
                )));
            }
            EpochSampler::new(n, rng::derive(seed, name)).map(Some)
        };
        Ok(Self {
            labeled: stream(num_labeled, labeled_quota, "labeled")?,
            pseudo: stream(num_pseudo, pseudo_quota, "pseudo-labeled")?,
            pseudo_quota,
            labeled_quota,
        })
    }

    pub fn next_batch(&mut self) -> MixedBatch {
        let take = |s: &mut Option<EpochSampler>, k: usize| s.as_mut().map(|s| s.take(k)).unwrap_or_default();
        MixedBatch {
            labeled: take(&mut self.labeled, self.labeled_quota),
            pseudo: take(&mut self.pseudo, self.pseudo_quota),
        }
    }
}

/// The first `count` batches of a [`BatchMixer`].
pub fn mix_batches(
    num_labeled: usize,
    num_pseudo: usize,
    nst_ratio: f64,
    batch_size: usize,
    seed: u64,
    count: usize,
) -> Result<Vec<MixedBatch>> {
    let mut m = BatchMixer::new(num_labeled, num_pseudo, nst_ratio, batch_size, seed)?;
    Ok((0..count).map(|_| m.next_batch()).collect())
}

/// How each student is initialised.
#[derive(Clone, Debug)]
pub enum StudentInit {
    Scratch,
    Pretrained(Checkpoint),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub teacher_dev_wer: Option<f64>,
    pub student_dev_wer: Option<f64>,
    pub pseudo_labeled: usize,
    pub retained: usize,
    pub keep_fraction: f64,
    pub nst_ratio: f64,
    pub pseudo_per_batch: usize,
    pub labeled_per_batch: usize,
    /// Ids of the retained pseudo-labeled utterances, in confidence order.
    pub retained_ids: Vec<String>,
    #[serde(default)]
    pub student_log: Option<TrainLog>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub complete: bool,
    pub generations: Vec<GenerationRecord>,
    /// Wall-clock seconds per stage; not part of the reproducible content.
    pub timings: Vec<StageTiming>,
    #[serde(default)]
    pub error: Option<String>,
}

impl GenerationReport {
    /// The report without wall-clock timings.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

/// Everything one NST run needs besides its configuration.
pub struct NstInputs<'a> {
    pub labeled: &'a [LabeledUtterance],
    pub unlabeled: &'a [Utterance],
    pub dev: &'a [LabeledUtterance],
    pub student_init: StudentInit,
    pub train: SupervisedConfig,
}

/// Result of the generation loop: the final student plus the retained
/// pseudo-labels of the last generation.
pub struct NstOutcome {
    pub student: AsrModel,
    pub retained: Vec<PseudoLabeledUtterance>,
    pub report: GenerationReport,
}

/// Pseudo-label, filter, mix and train a student, `cfg.generations` times.
///
/// On failure the partial report (flagged incomplete) is written to
/// `report_path` when one is given, and the error is returned.
pub fn run_generation(
    cfg: &NstConfig,
    teacher: AsrModel,
    inputs: &NstInputs,
    report_path: Option<&Path>,
) -> Result<NstOutcome> {
    let mut report = GenerationReport::default();
    match generations(cfg, teacher, inputs, &mut report) {
        Ok((student, retained)) => {
            report.complete = true;
            Ok(NstOutcome {
                student,
                retained,
                report,
            })
        }
        Err(e) => {
            report.complete = false;
            report.error = Some(e.to_string());
            if let Some(p) = report_path {
                fsutil::write_json_atomic(p, &report)?;
            }
            Err(e)
        }
    }
}

fn timed<T>(report: &mut GenerationReport, stage: String, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    report.timings.push(StageTiming {
        stage,
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

fn generations(
    cfg: &NstConfig,
    mut teacher: AsrModel,
    inputs: &NstInputs,
    report: &mut GenerationReport,
) -> Result<(AsrModel, Vec<PseudoLabeledUtterance>)> {
    cfg.validate()?;
    inputs.train.validate()?;
    let mut last = None;
    for g in 0..cfg.generations {
        let mut rec = GenerationRecord {
            generation: g,
            keep_fraction: cfg.keep_fraction,
            nst_ratio: cfg.nst_ratio,
            pseudo_per_batch: pseudo_quota(cfg.nst_ratio, inputs.train.batch_size),
            ..Default::default()
        };
        rec.labeled_per_batch = inputs.train.batch_size - rec.pseudo_per_batch;
        report.generations.push(rec.clone());
        if !inputs.dev.is_empty() {
            let t = &teacher;
            let w = timed(report, format!("gen{g}.teacher-eval"), || {
                evaluate_wer(&t.cfg, &t.eval_params()?, inputs.dev)
            })?;
            rec.teacher_dev_wer = Some(w);
        }
        let pseudo = timed(report, format!("gen{g}.pseudo-label"), || pseudo_label(&teacher, inputs.unlabeled))?;
        rec.pseudo_labeled = pseudo.len();
        let retained = timed(report, format!("gen{g}.filter"), || {
            filter_by_confidence(&pseudo, cfg.keep_fraction)
        })?;
        rec.retained = retained.len();
        rec.retained_ids = retained.iter().map(|p| p.id.clone()).collect();
        *report.generations.last_mut().expect("pushed") = rec.clone();

        let features: std::collections::HashMap<&str, &Utterance> =
            inputs.unlabeled.iter().map(|u| (u.id.as_str(), u)).collect();
        let mut pool: Vec<LabeledUtterance> = inputs.labeled.to_vec();
        for p in &retained {
            let u = features[p.id.as_str()];
            pool.push(LabeledUtterance {
                id: p.id.clone(),
                features: u.features.clone(),
                transcript: p.text.clone(),
                target: p.hypothesis.clone(),
            });
        }
        let n_labeled = inputs.labeled.len();
        let train_cfg = SupervisedConfig {
            seed: rng::derive_seed(inputs.train.seed, g as u64),
            ..inputs.train.clone()
        };
        let mut mixer = BatchMixer::new(
            n_labeled,
            retained.len(),
            cfg.nst_ratio,
            train_cfg.batch_size,
            rng::derive(train_cfg.seed, "nst-mix"),
        )?;
        let mut student = match &inputs.student_init {
            StudentInit::Scratch => AsrModel::initialise(&teacher.cfg, InitMode::Scratch, None, train_cfg.seed)?,
            StudentInit::Pretrained(c) => {
                AsrModel::initialise(&teacher.cfg, InitMode::EncoderPretrained, Some(c), train_cfg.seed)?
            }
        };
        let dev = (!inputs.dev.is_empty()).then_some(inputs.dev);
        let log = timed(report, format!("gen{g}.student-train"), || {
            train_with_batches(&mut student, &train_cfg, &pool, dev, |_| {
                let b = mixer.next_batch();
                Ok(b.labeled.into_iter().chain(b.pseudo.into_iter().map(|i| i + n_labeled)).collect())
            })
        })?;
        rec.student_dev_wer = log.eval_wer.last();
        rec.student_log = Some(log);
        *report.generations.last_mut().expect("pushed") = rec;
        last = Some(retained);
        if cfg.promote_student || g + 1 == cfg.generations {
            teacher = student;
        }
    }
    Ok((teacher, last.expect("at least one generation")))
}
