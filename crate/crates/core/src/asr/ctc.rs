//! CTC objective in log space with explicit −∞ handling.

use crate::audio::{TokenSequence, BLANK};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcResult {
    /// Negative log-likelihood; `+∞` when infeasible.
    pub loss: f64,
    pub feasible: bool,
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frames needed to emit `target`: one per label plus one blank between repeats.
pub fn min_frames(target: &TokenSequence) -> usize {
    let repeats = target.ids.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn check(log_probs: &Tensor, target: &TokenSequence) -> Result<()> {
    if log_probs.ndim() != 2 || log_probs.rows() == 0 {
        return Err(Error::shape(format!(
            "CTC input must be non-empty T x V, got {:?}",
            log_probs.shape()
        )));
    }
    let v = log_probs.cols();
    if let Some(&bad) = target.ids.iter().find(|&&i| i == BLANK || i >= v) {
        return Err(Error::contract(format!(
            "target id {bad} is blank or outside a {v}-symbol vocabulary"
        )));
    }
    if !log_probs.is_finite() {
        return Err(Error::NonFinite("CTC input".into()));
    }
    Ok(())
}

fn extended(target: &TokenSequence) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &id in &target.ids {
        ext.push(id);
        ext.push(BLANK);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]` over the blank-extended target.
fn forward(log_probs: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (log_probs.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = log_probs.at(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = log_probs.at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == f64::NEG_INFINITY {
                a
            } else {
                a + log_probs.at(t, ext[s])
            };
        }
    }
    alpha
}

/// `log P(target | x)` for row-normalised log-probabilities.
pub fn log_likelihood(log_probs: &Tensor, target: &TokenSequence) -> Result<f64> {
    check(log_probs, target)?;
    if min_frames(target) > log_probs.rows() {
        return Ok(f64::NEG_INFINITY);
    }
    let ext = extended(target);
    let alpha = forward(log_probs, &ext);
    let last = &alpha[log_probs.rows() - 1];
    let s = ext.len();
    Ok(if s > 1 {
        log_add(last[s - 1], last[s - 2])
    } else {
        last[0]
    })
}

/// CTC loss on unnormalised logits.
pub fn ctc_loss(logits: &Tensor, target: &TokenSequence) -> Result<CtcResult> {
    let ll = log_likelihood(&logits.log_softmax_rows(), target)?;
    Ok(CtcResult {
        loss: -ll,
        feasible: ll.is_finite(),
    })
}

/// Loss and its gradient w.r.t. the logits; the gradient is `None` when infeasible.
pub fn ctc_loss_and_grad(logits: &Tensor, target: &TokenSequence) -> Result<(CtcResult, Option<Tensor>)> {
    let lp = logits.log_softmax_rows();
    check(&lp, target)?;
    let (t_len, v) = (lp.rows(), lp.cols());
    if min_frames(target) > t_len {
        return Ok((
            CtcResult {
                loss: f64::INFINITY,
                feasible: false,
            },
            None,
        ));
    }
    let ext = extended(target);
    let s_len = ext.len();
    let alpha = forward(&lp, &ext);
    // beta[t][s]: log-probability of finishing from state s at t, excluding frame t's emission.
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + lp.at(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + lp.at(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + lp.at(t + 1, ext[s + 2]));
            }
            beta[t][s] = b;
        }
    }
    let last = &alpha[t_len - 1];
    let ll = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let mut occ = vec![f64::NEG_INFINITY; v];
        for s in 0..s_len {
            occ[ext[s]] = log_add(occ[ext[s]], alpha[t][s] + beta[t][s]);
        }
        for k in 0..v {
            let post = if occ[k] == f64::NEG_INFINITY {
                0.0
            } else {
                (occ[k] - ll).exp()
            };
            grad[t * v + k] = lp.at(t, k).exp() - post;
        }
    }
    Ok((
        CtcResult {
            loss: -ll,
            feasible: true,
        },
        Some(Tensor::matrix(t_len, v, grad)?),
    ))
}

/// Records the CTC loss of `logits` on the tape. `Ok(None)` when the target cannot fit.
pub fn ctc_loss_var(tape: &mut Tape, logits: Var, target: &TokenSequence) -> Result<Option<Var>> {
    let (res, grad) = ctc_loss_and_grad(tape.value(logits), target)?;
    match grad {
        None => Ok(None),
        Some(g) => tape.fused_loss(logits, res.loss, g.into_data()).map(Some),
    }
}
