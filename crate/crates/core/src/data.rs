//! In-memory utterances, manifest loading and epoch-shuffled sampling.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::audio::{logmel, read_manifest, wav, Manifest, Spectrogram, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::rng;

/// Normalised features of one utterance with an optional transcript.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: Spectrogram,
    pub transcript: Option<String>,
}

/// Utterance whose transcript has been encoded for CTC.
#[derive(Clone, Debug)]
pub struct LabeledUtterance {
    pub id: String,
    pub features: Spectrogram,
    pub transcript: String,
    pub target: TokenSequence,
}

impl LabeledUtterance {
    pub fn new(id: impl Into<String>, features: Spectrogram, transcript: impl Into<String>) -> Result<Self> {
        let transcript = transcript.into();
        let target = Vocabulary::new().encode(&transcript)?;
        Ok(Self {
            id: id.into(),
            features,
            transcript,
            target,
        })
    }

    pub fn from_utterance(u: &Utterance) -> Result<Self> {
        let t = u.transcript.as_ref().ok_or_else(|| {
            Error::contract(format!("utterance {} has no transcript", u.id))
        })?;
        Self::new(u.id.clone(), u.features.clone(), t.clone())
    }
}

/// Utterances that could not be read, with the reason.
pub type Skipped = Vec<(String, String)>;

/// Reads every manifest entry's audio and computes normalised log-mel features.
/// Unreadable entries are reported in the second return value.
pub fn load_manifest(path: &Path) -> Result<(Vec<Utterance>, Skipped)> {
    let manifest = read_manifest(path)?;
    load_entries(path, &manifest)
}

pub fn load_entries(manifest_path: &Path, manifest: &Manifest) -> Result<(Vec<Utterance>, Skipped)> {
    let mut out = Vec::with_capacity(manifest.len());
    let mut skipped = Vec::new();
    for e in &manifest.entries {
        let audio = Manifest::resolve_audio(manifest_path, e);
        match wav::read_wav(&audio).and_then(|w| logmel(&w)) {
            Ok(spec) => out.push(Utterance {
                id: e.id.clone(),
                features: spec.normalized(),
                transcript: e.transcript.clone(),
            }),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.id);
                skipped.push((e.id.clone(), err.to_string()));
            }
        }
    }
    Ok((out, skipped))
}

/// Loads a manifest whose every entry carries a transcript.
pub fn load_labeled(path: &Path) -> Result<Vec<LabeledUtterance>> {
    let manifest = read_manifest(path)?;
    if !manifest.is_fully_labeled() {
        return Err(Error::contract(format!(
            "{} is not fully labeled",
            path.display()
        )));
    }
    let (utts, skipped) = load_entries(path, &manifest)?;
    if let Some((id, why)) = skipped.first() {
        return Err(Error::contract(format!("labeled utterance {id} unreadable: {why}")));
    }
    utts.iter().map(LabeledUtterance::from_utterance).collect()
}

/// Endless index stream over `0..n`, reshuffled every epoch from a derived seed.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("cannot sample from an empty set"));
        }
        let mut s = Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut r = rng::rng(rng::derive_seed(self.seed, self.epoch));
        self.order.shuffle(&mut r);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }
}
