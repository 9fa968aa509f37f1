use std::collections::HashMap;

use crate::audio::Vocabulary;
use crate::error::{Error, Result};

/// Character n-gram language model with additive smoothing.
///
/// Symbols are grapheme ids `1..=28` plus an end-of-sentence symbol. Contexts
/// shorter than `order − 1` are left-padded with a start marker.
#[derive(Clone, Debug)]
pub struct CharNgramLm {
    order: usize,
    alpha: f64,
    num_symbols: usize,
    counts: HashMap<Vec<usize>, (HashMap<usize, f64>, f64)>,
}

const START: usize = 0;

impl CharNgramLm {
    pub fn eos(&self) -> usize {
        self.num_symbols
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Fits counts on `texts`; every character must be in the grapheme inventory.
    pub fn train(texts: &[String], order: usize, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::contract("n-gram order must be >= 1"));
        }
        if !(alpha > 0.0) {
            return Err(Error::contract("smoothing constant must be positive"));
        }
        let vocab = Vocabulary::new();
        let num_symbols = vocab.size();
        let mut lm = Self {
            order,
            alpha,
            num_symbols,
            counts: HashMap::new(),
        };
        for text in texts {
            let mut ids = vocab.encode(text)?.ids;
            ids.push(lm.eos());
            let mut history: Vec<usize> = Vec::new();
            for id in ids {
                let ctx = lm.context(&history);
                let entry = lm.counts.entry(ctx).or_default();
                *entry.0.entry(id).or_insert(0.0) += 1.0;
                entry.1 += 1.0;
                history.push(id);
            }
        }
        Ok(lm)
    }

    /// Smoothed distribution support: graphemes plus end-of-sentence.
    pub fn support(&self) -> impl Iterator<Item = usize> {
        (1..self.num_symbols).chain(std::iter::once(self.num_symbols))
    }

    fn context(&self, history: &[usize]) -> Vec<usize> {
        let n = self.order - 1;
        let mut ctx = vec![START; n.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n)..]);
        ctx
    }

    /// `ln P(symbol | history)`; `symbol` is a grapheme id or [`Self::eos`].
    pub fn log_prob(&self, history: &[usize], symbol: usize) -> f64 {
        let support = self.num_symbols as f64;
        let (c, total) = match self.counts.get(&self.context(history)) {
            Some((m, total)) => (m.get(&symbol).copied().unwrap_or(0.0), *total),
            None => (0.0, 0.0),
        };
        ((c + self.alpha) / (total + self.alpha * support)).ln()
    }

    /// Sum of per-grapheme log-probabilities, as accumulated at emission time during decoding.
    pub fn prefix_score(&self, ids: &[usize]) -> f64 {
        (0..ids.len()).map(|i| self.log_prob(&ids[..i], ids[i])).sum()
    }

    /// Log-probability of a complete sentence, end-of-sentence included.
    pub fn sentence_score(&self, ids: &[usize]) -> f64 {
        self.prefix_score(ids) + self.log_prob(ids, self.eos())
    }
}
