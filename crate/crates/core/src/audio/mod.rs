//! Synthetic audio, log-mel features, grapheme tokens and manifests.

pub mod corpus;
pub mod logmel;
pub mod manifest;
pub mod synth;
pub mod tokenizer;
pub mod wav;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use corpus::{corpus_items, write_corpus, CorpusItem, CorpusSpec};
pub use logmel::{logmel, LogMel, NUM_MEL};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestEntry};
pub use synth::{synth_utterance, synth_with_voice, Voice};
pub use tokenizer::{word_count, TokenSequence, Vocabulary, BLANK};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_SHIFT_MS: u32 = 10;
pub const FRAME_LENGTH_MS: u32 = 25;

/// Mono PCM16 audio at 16 kHz.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Waveform {
    pub samples: Vec<i16>,
}

impl Waveform {
    pub fn new(samples: Vec<i16>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("waveform is empty"));
        }
        Ok(Self { samples })
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// `T × 80` log-mel frames at a 10 ms shift with 25 ms windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: Tensor,
}

impl Spectrogram {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 || frames.cols() != NUM_MEL {
            return Err(Error::shape(format!(
                "spectrogram must be T x {NUM_MEL}, got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Per-utterance mean and variance normalization of every mel channel.
    pub fn normalized(&self) -> Spectrogram {
        let (t, c) = (self.frames.rows(), self.frames.cols());
        let mean = self.frames.mean_rows();
        let mut var = vec![0.0; c];
        for i in 0..t {
            for (j, v) in self.frames.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let mut out = self.frames.clone();
        for i in 0..t {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / (var[j] / t as f64 + 1e-5).sqrt();
            }
        }
        Spectrogram { frames: out }
    }
}
