use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::{InitMode, SupervisedConfig};
use crate::audio::CorpusSpec;
use crate::conformer::{ConformerConfig, Preset};
use crate::error::{Error, Result};
use crate::numerics::LrSchedule;
use crate::pretrain::PretrainConfig;
use crate::probe::{HeadConfig, ProbeMethod, ProbeOptions};
use crate::specaugment::AugmentPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenCorpus,
    Pretrain,
    Finetune,
    Nst,
    Probe,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Nst => "nst",
            Command::Probe => "probe",
            Command::Evaluate => "evaluate",
        }
    }
}

/// One experiment. Every stage seed is derived from `seed`; relative paths
/// are resolved against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    /// Explicit architecture; replaces the preset when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ConformerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nst: Option<NstSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSection>,
}

fn default_preset() -> Preset {
    Preset::Xs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub num_utterances: usize,
    #[serde(default)]
    pub dev_utterances: usize,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    #[serde(default = "default_voices")]
    pub num_voices: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<Vec<String>>,
}

fn default_noise() -> f64 {
    CorpusSpec::new(0, 0).noise_level
}
fn default_min_words() -> usize {
    CorpusSpec::new(0, 0).min_words
}
fn default_max_words() -> usize {
    CorpusSpec::new(0, 0).max_words
}
fn default_voices() -> usize {
    CorpusSpec::new(0, 0).num_voices
}

impl CorpusSection {
    pub fn spec(&self, num_utterances: usize, seed: u64) -> CorpusSpec {
        CorpusSpec {
            num_utterances,
            seed,
            noise_level: self.noise_level,
            min_words: self.min_words,
            max_words: self.max_words,
            num_voices: self.num_voices,
            lexicon: self.lexicon.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub manifest: PathBuf,
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
    #[serde(default)]
    pub stop_target_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn default_start_prob() -> f64 {
    PretrainConfig::new(1, 1, LrSchedule::transformer(1.0, 1), 0).mask_start_prob
}
fn default_span() -> usize {
    PretrainConfig::new(1, 1, LrSchedule::transformer(1.0, 1), 0).mask_span
}
fn default_negatives() -> usize {
    PretrainConfig::new(1, 1, LrSchedule::transformer(1.0, 1), 0).negatives
}
fn default_temperature() -> f64 {
    PretrainConfig::new(1, 1, LrSchedule::transformer(1.0, 1), 0).temperature
}

impl PretrainSection {
    pub fn config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            schedule: self.schedule,
            mask_start_prob: self.mask_start_prob,
            mask_span: self.mask_span,
            negatives: self.negatives,
            temperature: self.temperature,
            stop_target_grad: self.stop_target_grad,
            ema_decay: self.ema_decay,
            grad_clip: self.grad_clip,
            seed,
        }
    }
}

/// Supervised CTC training settings shared by fine-tuning and NST students.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub encoder_schedule: LrSchedule,
    pub decoder_schedule: LrSchedule,
    #[serde(default = "default_true")]
    pub spec_augment: bool,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub eval_every: u64,
}

fn default_true() -> bool {
    true
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> SupervisedConfig {
        SupervisedConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            encoder_schedule: self.encoder_schedule,
            decoder_schedule: self.decoder_schedule,
            augment: self.spec_augment.then_some(self.augment),
            ema_decay: self.ema_decay,
            grad_clip: self.grad_clip,
            eval_every: self.eval_every,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// Fully labeled pool; each fraction trains on a nested seeded subset.
    pub labeled_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_checkpoint: Option<PathBuf>,
    #[serde(default = "default_fractions")]
    pub label_fractions: Vec<f64>,
    #[serde(default = "default_inits")]
    pub inits: Vec<InitMode>,
    pub train: TrainSection,
}

fn default_fractions() -> Vec<f64> {
    vec![1.0]
}
fn default_inits() -> Vec<InitMode> {
    vec![InitMode::Scratch]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NstSection {
    pub labeled_manifest: PathBuf,
    pub unlabeled_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    /// Full (encoder + decoder) teacher model.
    pub teacher_checkpoint: PathBuf,
    /// Encoder the student starts from; absent means a random student.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_checkpoint: Option<PathBuf>,
    pub keep_fraction: f64,
    pub nst_ratio: f64,
    #[serde(default = "default_generations")]
    pub generations: usize,
    #[serde(default = "default_true")]
    pub promote_student: bool,
    pub train: TrainSection,
}

fn default_generations() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTaskKind {
    /// Generator voice of each clip.
    Speaker,
    /// Number of words in the transcript.
    WordCount,
}

impl ProbeTaskKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTaskKind::Speaker => "speaker",
            ProbeTaskKind::WordCount => "word-count",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Encoder or full checkpoint; absent probes a randomly initialised encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub manifest: PathBuf,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<ProbeTaskKind>,
    #[serde(default = "default_methods")]
    pub methods: Vec<ProbeMethod>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default)]
    pub options: ProbeOptions,
    /// Frame-level multi-label head over the word inventory, scored by mAP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multilabel: Option<MultiLabelSection>,
}

fn default_tasks() -> Vec<ProbeTaskKind> {
    vec![ProbeTaskKind::Speaker, ProbeTaskKind::WordCount]
}
fn default_methods() -> Vec<ProbeMethod> {
    ProbeMethod::ALL.to_vec()
}
fn default_train_fraction() -> f64 {
    0.6
}
fn default_dev_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiLabelSection {
    /// Layer whose frames feed the head; defaults to the encoder output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<i64>,
    #[serde(default)]
    pub head: HeadConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Full model checkpoint.
    pub checkpoint: PathBuf,
    /// Labeled set reported on.
    pub manifest: PathBuf,
    /// Labeled set used to tune fusion; defaults to `manifest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune_manifest: Option<PathBuf>,
    /// Transcripts the character language model is estimated from.
    pub lm_manifest: PathBuf,
    #[serde(default = "default_lm_order")]
    pub lm_order: usize,
    #[serde(default = "default_lm_smoothing")]
    pub lm_smoothing: f64,
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_trials")]
    pub fusion_trials: usize,
    #[serde(default = "default_true")]
    pub include_baseline: bool,
}

fn default_lm_order() -> usize {
    4
}
fn default_lm_smoothing() -> f64 {
    0.1
}
fn default_beam() -> usize {
    4
}
fn default_trials() -> usize {
    16
}

fn missing(section: &str) -> Error {
    Error::Config {
        field: section.into(),
        message: "section required by this command is missing".into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML, reporting the field path of any schema violation.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Config {
                field: if field == "." { "<root>".into() } else { field },
                message: e.into_inner().message().trim().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::fsutil::read_to_string(path)?)
    }

    pub fn architecture(&self) -> ConformerConfig {
        self.model.clone().unwrap_or_else(|| ConformerConfig::preset(self.preset))
    }

    /// SHA-256 over the canonical JSON form of the effective config.
    pub fn digest(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn base_run_id(&self) -> Result<String> {
        Ok(match &self.run_id {
            Some(id) => id.clone(),
            None => format!("{}-{}", self.command.name(), &self.digest()?[..12]),
        })
    }

    pub fn corpus(&self) -> Result<&CorpusSection> {
        self.corpus.as_ref().ok_or_else(|| missing("corpus"))
    }
    pub fn pretrain(&self) -> Result<&PretrainSection> {
        self.pretrain.as_ref().ok_or_else(|| missing("pretrain"))
    }
    pub fn finetune(&self) -> Result<&FinetuneSection> {
        self.finetune.as_ref().ok_or_else(|| missing("finetune"))
    }
    pub fn nst(&self) -> Result<&NstSection> {
        self.nst.as_ref().ok_or_else(|| missing("nst"))
    }
    pub fn probe(&self) -> Result<&ProbeSection> {
        self.probe.as_ref().ok_or_else(|| missing("probe"))
    }
    pub fn evaluate(&self) -> Result<&EvaluateSection> {
        self.evaluate.as_ref().ok_or_else(|| missing("evaluate"))
    }
}
