use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ctc::{log_add, log_likelihood};
use super::lm::CharNgramLm;
use crate::audio::{TokenSequence, BLANK};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Shallow-fusion settings for beam decoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    pub fusion_weight: f64,
    pub non_blank_reward: f64,
    pub beam_width: usize,
}

impl FusionParams {
    pub fn new(fusion_weight: f64, non_blank_reward: f64, beam_width: usize) -> Self {
        Self {
            fusion_weight,
            non_blank_reward,
            beam_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::contract("beam_width must be >= 1"));
        }
        if !(self.fusion_weight >= 0.0) || !self.fusion_weight.is_finite() {
            return Err(Error::contract(format!(
                "fusion_weight {} must be finite and >= 0",
                self.fusion_weight
            )));
        }
        if !self.non_blank_reward.is_finite() {
            return Err(Error::contract("non_blank_reward must be finite"));
        }
        Ok(())
    }
}

/// Per-frame argmax, repeats collapsed, blanks removed.
pub fn greedy_decode(logits: &Tensor) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for k in logits.argmax_rows() {
        if k != BLANK && k != prev {
            out.push(k);
        }
        prev = k;
    }
    TokenSequence::new(out)
}

/// `log P_ctc(seq) + λ·log P_lm(seq) + β·|seq|` with the LM scored per emitted grapheme.
pub fn fused_score(logits: &Tensor, lm: &CharNgramLm, fp: &FusionParams, seq: &TokenSequence) -> Result<f64> {
    let ac = log_likelihood(&logits.log_softmax_rows(), seq)?;
    Ok(fuse(ac, lm_term(lm, fp, &seq.ids), fp, seq.len()))
}

fn lm_term(lm: &CharNgramLm, fp: &FusionParams, ids: &[usize]) -> f64 {
    if fp.fusion_weight == 0.0 {
        0.0
    } else {
        lm.prefix_score(ids)
    }
}

fn fuse(acoustic: f64, lm: f64, fp: &FusionParams, len: usize) -> f64 {
    acoustic + fp.fusion_weight * lm + fp.non_blank_reward * len as f64
}

#[derive(Clone, Debug)]
struct Hyp {
    prefix: Vec<usize>,
    ends_blank: bool,
    acoustic: f64,
    lm: f64,
}

/// Prefix beam search under the fused objective.
///
/// Hypotheses are kept per (prefix, ends-in-blank) so that a width-1 beam follows
/// the per-frame argmax path exactly. Surviving prefixes and the greedy output
/// are rescored with the exact CTC likelihood and the best one is returned.
pub fn beam_decode_fused(logits: &Tensor, lm: &CharNgramLm, fp: &FusionParams) -> Result<TokenSequence> {
    fp.validate()?;
    let lp = logits.log_softmax_rows();
    if lp.ndim() != 2 || lp.rows() == 0 {
        return Err(Error::shape(format!("logits must be non-empty T x V, got {:?}", lp.shape())));
    }
    if !lp.is_finite() {
        return Err(Error::NonFinite("decoder logits".into()));
    }
    let v = lp.cols();
    if v > lm.eos() {
        return Err(Error::contract(format!(
            "language model covers {} graphemes but logits have {} non-blank symbols",
            lm.eos() - 1,
            v - 1
        )));
    }
    let use_lm = fp.fusion_weight != 0.0;
    let mut beam = vec![Hyp {
        prefix: Vec::new(),
        ends_blank: true,
        acoustic: 0.0,
        lm: 0.0,
    }];
    for t in 0..lp.rows() {
        let row = lp.row(t);
        let mut next: Vec<Hyp> = Vec::new();
        let mut index: HashMap<(Vec<usize>, bool), usize> = HashMap::new();
        let mut push = |h: Hyp, next: &mut Vec<Hyp>| {
            let key = (h.prefix.clone(), h.ends_blank);
            match index.get(&key) {
                Some(&i) => next[i].acoustic = log_add(next[i].acoustic, h.acoustic),
                None => {
                    index.insert(key, next.len());
                    next.push(h);
                }
            }
        };
        for h in &beam {
            for (k, &score) in row.iter().enumerate() {
                let acoustic = h.acoustic + score;
                if k == BLANK {
                    push(
                        Hyp {
                            prefix: h.prefix.clone(),
                            ends_blank: true,
                            acoustic,
                            lm: h.lm,
                        },
                        &mut next,
                    );
                } else if !h.ends_blank && h.prefix.last() == Some(&k) {
                    push(
                        Hyp {
                            prefix: h.prefix.clone(),
                            ends_blank: false,
                            acoustic,
                            lm: h.lm,
                        },
                        &mut next,
                    );
                } else {
                    let lm_score = if use_lm { h.lm + lm.log_prob(&h.prefix, k) } else { 0.0 };
                    let mut prefix = h.prefix.clone();
                    prefix.push(k);
                    push(
                        Hyp {
                            prefix,
                            ends_blank: false,
                            acoustic,
                            lm: lm_score,
                        },
                        &mut next,
                    );
                }
            }
        }
        let mut scored: Vec<(f64, Hyp)> = next
            .into_iter()
            .map(|h| (fuse(h.acoustic, h.lm, fp, h.prefix.len()), h))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(fp.beam_width);
        beam = scored.into_iter().map(|(_, h)| h).collect();
    }
    let mut candidates: Vec<Vec<usize>> = Vec::new();
    for h in beam {
        if !candidates.contains(&h.prefix) {
            candidates.push(h.prefix);
        }
    }
    let greedy = greedy_decode(&lp).ids;
    if !candidates.contains(&greedy) {
        candidates.push(greedy);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for ids in candidates {
        let ac = log_likelihood(&lp, &TokenSequence::new(ids.clone()))?;
        let score = fuse(ac, lm_term(lm, fp, &ids), fp, ids.len());
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, ids));
        }
    }
    Ok(TokenSequence::new(best.map(|(_, ids)| ids).unwrap_or_default()))
}

/// One line of a decoding results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub id: String,
    pub hypothesis: String,
    pub words: usize,
    pub log_score: f64,
}

pub fn decode_records_to_jsonl(records: &[DecodeRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_records_from_jsonl(text: &str) -> Result<Vec<DecodeRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(argmax: &[usize], v: usize) -> Tensor {
        let mut data = vec![0.0; argmax.len() * v];
        for (t, &k) in argmax.iter().enumerate() {
            data[t * v + k] = 5.0;
        }
        Tensor::matrix(argmax.len(), v, data).unwrap()
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(greedy_decode(&frames(&[0, 1, 1, 0, 2], 3)).ids, vec![1, 2]);
        assert!(greedy_decode(&frames(&[0, 0, 0], 3)).is_empty());
        assert_eq!(greedy_decode(&frames(&[1, 0, 1], 3)).ids, vec![1, 1]);
    }

    #[test]
    fn zero_beam_is_rejected() {
        let lm = CharNgramLm::train(&[], 4, 0.1).unwrap();
        let r = beam_decode_fused(&frames(&[1], 3), &lm, &FusionParams::new(0.0, 0.0, 0));
        assert!(r.is_err());
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![DecodeRecord {
            id: "u1".into(),
            hypothesis: "a b".into(),
            words: 2,
            log_score: -1.25,
        }];
        let text = decode_records_to_jsonl(&recs).unwrap();
        assert_eq!(decode_records_from_jsonl(&text).unwrap(), recs);
    }
}
