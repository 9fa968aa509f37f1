//! Tone-signature audio standing in for recorded speech.
//!
//! Each grapheme renders as 120 ms split into three 40 ms segments. The
//! first segment carries a low-band tone, the second a high-band tone and
//! the third both, so every grapheme has a distinct spectro-temporal
//! pattern. A voice scales all frequencies.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tokenizer::Vocabulary;
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::rng;

pub const GRAPHEME_MS: usize = 120;
pub const SAMPLES_PER_GRAPHEME: usize = SAMPLE_RATE as usize * GRAPHEME_MS / 1000;

const LOW_BAND: [f64; 7] = [300.0, 380.0, 470.0, 580.0, 720.0, 880.0, 1060.0];
const HIGH_BAND: [f64; 5] = [1400.0, 1800.0, 2300.0, 2900.0, 3600.0];
const AMPLITUDE: f64 = 0.25;
const RAMP: usize = 80;

/// Speaker-like rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voice {
    pub pitch: f64,
}

impl Default for Voice {
    fn default() -> Self {
        Self { pitch: 1.0 }
    }
}

impl Voice {
    /// Voice `index` out of `count`, with pitch spread evenly over [0.93, 1.07].
    /// The spread stays below the spacing of neighbouring tone bands.
    pub fn indexed(index: usize, count: usize) -> Self {
        if count <= 1 {
            return Self::default();
        }
        let frac = index as f64 / (count - 1) as f64;
        Self {
            pitch: 0.93 + 0.14 * frac,
        }
    }
}

fn signature(id: usize) -> (f64, f64) {
    // ids 1..=28 map to distinct (low, high) pairs.
    (LOW_BAND[id % 7], HIGH_BAND[(id / 7) % 5])
}

pub fn synth_utterance(transcript: &str, seed: u64, noise_level: f64) -> Result<Waveform> {
    synth_with_voice(transcript, seed, noise_level, Voice::default())
}

pub fn synth_with_voice(
    transcript: &str,
    seed: u64,
    noise_level: f64,
    voice: Voice,
) -> Result<Waveform> {
    if transcript.is_empty() {
        return Err(Error::contract("cannot synthesize an empty transcript"));
    }
    if !(noise_level >= 0.0) {
        return Err(Error::contract(format!("noise level must be >= 0, got {noise_level}")));
    }
    let vocab = Vocabulary::new();
    let ids = vocab.encode(transcript)?;
    let space = vocab.space_id();
    let mut r = rng::rng(seed);
    let seg = SAMPLES_PER_GRAPHEME / 3;
    let sr = SAMPLE_RATE as f64;
    let mut out = Vec::with_capacity(ids.len() * SAMPLES_PER_GRAPHEME);

    for &id in &ids.ids {
        let (lo, hi) = signature(id);
        let (lo, hi) = (lo * voice.pitch, hi * voice.pitch);
        let gain = if id == space { 0.1 } else { 1.0 };
        let phases: [f64; 4] = std::array::from_fn(|_| r.gen::<f64>() * std::f64::consts::TAU);
        for n in 0..SAMPLES_PER_GRAPHEME {
            let t = n as f64 / sr;
            let s = match n / seg {
                0 => (std::f64::consts::TAU * lo * t + phases[0]).sin(),
                1 => (std::f64::consts::TAU * hi * t + phases[1]).sin(),
                _ => {
                    0.5 * (std::f64::consts::TAU * lo * t + phases[2]).sin()
                        + 0.5 * (std::f64::consts::TAU * hi * t + phases[3]).sin()
                }
            };
            let k = n % seg;
            let env = if k < RAMP {
                k as f64 / RAMP as f64
            } else if k >= seg - RAMP {
                (seg - 1 - k) as f64 / RAMP as f64
            } else {
                1.0
            };
            out.push(AMPLITUDE * gain * env * s);
        }
    }
    let samples = out
        .into_iter()
        .map(|v| {
            let noisy = v + noise_level * AMPLITUDE * r.sample::<f64, _>(StandardNormal);
            (noisy * 32767.0).round().clamp(-32768.0, 32767.0) as i16
        })
        .collect();
    Waveform::new(samples)
}
