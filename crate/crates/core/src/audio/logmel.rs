use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Spectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NUM_MEL: usize = 80;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-6;

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Center frequencies of the 80 triangular filters, plus the two outer edges.
pub fn mel_edges_hz() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    (0..NUM_MEL + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MEL + 1) as f64))
        .collect()
}

/// Log-mel front end: Hann-windowed magnitude STFT, triangular mel filters, natural log.
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `[NUM_MEL][FFT_SIZE/2 + 1]` filter weights.
    filters: Vec<Vec<f64>>,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / WINDOW as f64).cos())
            .collect();
        let edges = mel_edges_hz();
        let bins = FFT_SIZE / 2 + 1;
        let filters = (0..NUM_MEL)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            fft,
            window,
            filters,
        }
    }

    pub fn num_frames(num_samples: usize) -> Option<usize> {
        (num_samples >= WINDOW).then(|| (num_samples - WINDOW) / HOP + 1)
    }

    pub fn compute(&self, w: &Waveform) -> Result<Spectrogram> {
        let n = w.samples.len();
        let frames = Self::num_frames(n).ok_or_else(|| {
            Error::contract(format!("waveform of {n} samples is shorter than one {WINDOW}-sample window"))
        })?;
        let mut out = Vec::with_capacity(frames * NUM_MEL);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut mag = vec![0.0; FFT_SIZE / 2 + 1];
        for t in 0..frames {
            let start = t * HOP;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < WINDOW {
                    Complex::new(w.samples[start + i] as f64 / 32768.0 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
                out.push(e.max(LOG_FLOOR).ln());
            }
        }
        Ok(Spectrogram {
            frames: Tensor::matrix(frames, NUM_MEL, out)?,
        })
    }
}

pub fn logmel(w: &Waveform) -> Result<Spectrogram> {
    LogMel::new().compute(w)
}
