use crate::error::{Error, Result};

/// Unit-cost Levenshtein distance between word sequences.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Word errors and reference length of a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerStats {
    pub errors: usize,
    pub reference_words: usize,
}

impl WerStats {
    pub fn rate(&self) -> Result<f64> {
        if self.reference_words == 0 {
            return Err(Error::contract("WER is undefined for an empty reference corpus"));
        }
        Ok(self.errors as f64 / self.reference_words as f64)
    }
}

pub fn wer_stats<S: AsRef<str>, H: AsRef<str>>(refs: &[S], hyps: &[H]) -> Result<WerStats> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut stats = WerStats::default();
    for (r, h) in refs.iter().zip(hyps) {
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        stats.errors += edit_distance(&rw, &hw);
        stats.reference_words += rw.len();
    }
    Ok(stats)
}

/// Total word edit distance divided by total reference words.
pub fn wer<S: AsRef<str>, H: AsRef<str>>(refs: &[S], hyps: &[H]) -> Result<f64> {
    wer_stats(refs, hyps)?.rate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_rates() {
        assert_eq!(wer(&["a b c"], &["a b c"]).unwrap(), 0.0);
        assert!((wer(&["a b c"], &["a x c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&["a b c d"], &[""]).unwrap(), 1.0);
        assert!(wer::<&str, &str>(&[""], &["x"]).is_err());
        assert!(wer(&["a"], &["a", "b"]).is_err());
    }
}
