use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Manifest, ManifestEntry};
use super::synth::{synth_with_voice, Voice, GRAPHEME_MS};
use super::wav::write_wav;
use super::Waveform;
use crate::error::{Error, Result};
use crate::numerics::rng;

/// Default word list; together the words cover every letter and the apostrophe.
pub const DEFAULT_LEXICON: [&str; 24] = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "pack", "my", "box", "with",
    "five", "dozen", "liquor", "jugs", "sphinx", "of", "black", "quartz", "judge", "vow", "it's",
    "we",
];

/// Upper bound that keeps synthetic utterances under 12 s.
pub const MAX_GRAPHEMES: usize = 12_000 / GRAPHEME_MS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_utterances: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    #[serde(default = "default_voices")]
    pub num_voices: usize,
    #[serde(default)]
    pub lexicon: Option<Vec<String>>,
}

fn default_noise() -> f64 {
    0.3
}
fn default_min_words() -> usize {
    1
}
fn default_max_words() -> usize {
    3
}
fn default_voices() -> usize {
    4
}

impl CorpusSpec {
    pub fn new(num_utterances: usize, seed: u64) -> Self {
        Self {
            num_utterances,
            seed,
            noise_level: default_noise(),
            min_words: default_min_words(),
            max_words: default_max_words(),
            num_voices: default_voices(),
            lexicon: None,
        }
    }

    pub fn lexicon(&self) -> Vec<String> {
        self.lexicon
            .clone()
            .unwrap_or_else(|| DEFAULT_LEXICON.iter().map(|s| s.to_string()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::contract("need 1 <= min_words <= max_words"));
        }
        if self.num_voices == 0 {
            return Err(Error::contract("num_voices must be >= 1"));
        }
        if self.lexicon().is_empty() {
            return Err(Error::contract("lexicon is empty"));
        }
        Ok(())
    }
}

/// Generator record for one utterance, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub transcript: String,
    pub speaker: usize,
    pub audio_seed: u64,
}

impl CorpusItem {
    pub fn render(&self, spec: &CorpusSpec) -> Result<Waveform> {
        synth_with_voice(
            &self.transcript,
            self.audio_seed,
            spec.noise_level,
            Voice::indexed(self.speaker, spec.num_voices),
        )
    }
}

pub fn corpus_items(spec: &CorpusSpec) -> Result<Vec<CorpusItem>> {
    spec.validate()?;
    let lexicon = spec.lexicon();
    let mut r = rng::rng(rng::derive(spec.seed, "corpus-text"));
    let mut items = Vec::with_capacity(spec.num_utterances);
    for i in 0..spec.num_utterances {
        let n = r.gen_range(spec.min_words..=spec.max_words);
        let mut words: Vec<&str> = Vec::with_capacity(n);
        for _ in 0..n {
            words.push(lexicon.choose(&mut r).expect("non-empty lexicon"));
        }
        let mut transcript = words.join(" ");
        if transcript.chars().count() > MAX_GRAPHEMES {
            transcript = transcript.chars().take(MAX_GRAPHEMES).collect::<String>();
            transcript = transcript.trim_end().to_string();
        }
        items.push(CorpusItem {
            id: format!("utt{i:05}"),
            transcript,
            speaker: r.gen_range(0..spec.num_voices),
            audio_seed: rng::derive_seed(spec.seed, i as u64),
        });
    }
    Ok(items)
}

/// Renders the corpus into `dir` as WAV files plus `manifest.jsonl`.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    let items = corpus_items(spec)?;
    let audio_dir = dir.join("audio");
    let mut entries = Vec::with_capacity(items.len());
    for item in &items {
        let w = item.render(spec)?;
        let rel = format!("audio/{}.wav", item.id);
        write_wav(&audio_dir.join(format!("{}.wav", item.id)), &w)?;
        entries.push(ManifestEntry {
            speaker: Some(item.speaker as u32),
            ..ManifestEntry::new(&item.id, rel, w.duration_s()).with_transcript(&item.transcript)
        });
    }
    let manifest = Manifest::new(entries)?;
    write_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
