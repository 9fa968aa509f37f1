//! Per-seed gradient checks shared by the gradient and acceptance suites.

use super::{grad_check, GradReport};
use deskssl::asr::ctc_loss_var;
use deskssl::audio::{Spectrogram, TokenSequence, NUM_MEL};
use deskssl::conformer::{conformer_block, encode_features, init_params, subsample, ConformerConfig, Fwd};
use deskssl::numerics::{rng, LrSchedule, ParamStore, Tape, Tensor, Var};
use deskssl::pretrain::{self, PretrainConfig};
use deskssl::probe::{FrameClip, MultiLabelHead};
use rand::Rng;

pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn small_cfg(relative: bool) -> ConformerConfig {
    let mut c = ConformerConfig::new(2, 16, 4);
    c.relative_attention = relative;
    c.subsample_channels = 2;
    c.dropout = 0.0;
    c
}

/// Random non-zero values everywhere, so no branch is trivially zero.
fn perturbed_model(cfg: &ConformerConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    let mut r = rng::rng(seed);
    init_params(cfg, &mut s, &mut r).unwrap();
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        let noise = Tensor::randn(s.get(id).shape(), 0.1, &mut r);
        let t = s.get_mut(id);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    s
}

fn spec(t: usize, seed: u64) -> Spectrogram {
    Spectrogram::new(Tensor::randn(&[t, NUM_MEL], 1.0, &mut rng::rng(seed))).unwrap()
}

/// Fixed random projection of a var to a scalar, so every output entry matters.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng::rng(seed ^ 0xabc));
    let w = tape.constant(w);
    let y = tape.mul(x, w).unwrap();
    tape.sum(y)
}

/// Two stacked Conformer blocks on a free input.
pub fn conformer_blocks(relative: bool, seed: u64) -> GradReport {
    let cfg = small_cfg(relative);
    let mut store = perturbed_model(&cfg, seed);
    let x = Tensor::randn(&[7, 16], 1.0, &mut rng::rng(seed + 100));
    store.insert("input", x).unwrap();
    grad_check(
        &store,
        |tape, s| {
            let mut fwd = Fwd::eval(tape, s);
            let x = fwd.p("input").unwrap();
            let y = conformer_block(&mut fwd, &cfg, 0, x).unwrap();
            let y = conformer_block(&mut fwd, &cfg, 1, y).unwrap();
            project(tape, y, seed)
        },
        1e-5,
        4,
        seed,
    )
}

pub fn subsampling(seed: u64) -> GradReport {
    let cfg = small_cfg(true);
    let store = perturbed_model(&cfg, seed);
    let s = spec(13, seed + 7);
    grad_check(
        &store,
        |tape, st| {
            let mut fwd = Fwd::eval(tape, st);
            let y = subsample(&mut fwd, &cfg, &s).unwrap();
            project(tape, y, seed)
        },
        1e-6,
        8,
        seed,
    )
}

/// Subsampling, encoder and output layer under the CTC loss.
pub fn encoder_ctc(seed: u64) -> GradReport {
    let cfg = small_cfg(true);
    let mut store = perturbed_model(&cfg, seed);
    deskssl::conformer::layers::init::linear(&mut store, "decoder.out", 16, 5, &mut rng::rng(seed)).unwrap();
    let s = spec(24, seed + 3);
    let target = TokenSequence::new(vec![1, 3, 3]);
    grad_check(
        &store,
        |tape, st| {
            let mut fwd = Fwd::eval(tape, st);
            let f = subsample(&mut fwd, &cfg, &s).unwrap();
            let acts = encode_features(&mut fwd, &cfg, f, None).unwrap();
            let logits = fwd.linear(*acts.last().unwrap(), "decoder.out").unwrap();
            ctc_loss_var(tape, logits, &target).unwrap().unwrap()
        },
        1e-6,
        3,
        seed,
    )
}

/// CTC loss with respect to free logits of random shape and feasible target.
pub fn ctc_logits(seed: u64) -> GradReport {
    let mut r = rng::rng(rng::derive(seed, "ctc-shape"));
    let (t, v, target) = loop {
        let t = r.gen_range(3..=8);
        let v = r.gen_range(3..=6);
        let len = r.gen_range(1..=t.min(3));
        let target = TokenSequence::new((0..len).map(|_| r.gen_range(1..v)).collect());
        if deskssl::asr::min_frames(&target) <= t {
            break (t, v, target);
        }
    };
    let mut store = ParamStore::new();
    store.insert("logits", Tensor::randn(&[t, v], 1.0, &mut rng::rng(seed))).unwrap();
    grad_check(
        &store,
        |tape, s| {
            let x = tape.param_by_name(s, "logits").unwrap();
            ctc_loss_var(tape, x, &target).unwrap().unwrap()
        },
        1e-5,
        64,
        seed,
    )
}

/// Full pre-training loss through the masked encoder. Gradients flow into the
/// targets here; with stopped target gradients the analytic result
/// deliberately omits a path that finite differences see.
pub fn contrastive_model(seed: u64) -> GradReport {
    let cfg = small_cfg(true);
    let store = pretrain::init_params(&cfg, seed).unwrap();
    let mut pcfg = PretrainConfig::new(1, 1, LrSchedule::transformer(1e-3, 10), seed);
    pcfg.mask_start_prob = 0.3;
    pcfg.mask_span = 2;
    let s = spec(28, seed + 11);
    grad_check(
        &store,
        |tape, st| pretrain::utterance_loss(tape, st, &cfg, &pcfg, &s, seed, None).unwrap().unwrap(),
        1e-6,
        3,
        seed,
    )
}

/// The loss op alone, with free context and target matrices.
pub fn contrastive_head(seed: u64) -> GradReport {
    let mut store = ParamStore::new();
    let mut r = rng::rng(seed);
    store.insert("c", Tensor::randn(&[9, 6], 1.0, &mut r)).unwrap();
    store.insert("q", Tensor::randn(&[9, 6], 1.0, &mut r)).unwrap();
    let anchors = vec![1, 2, 3, 6];
    let negs = pretrain::sample_negatives(&anchors, 9, 5, &mut r).unwrap();
    grad_check(
        &store,
        |tape, st| {
            let c = tape.param_by_name(st, "c").unwrap();
            let q = tape.param_by_name(st, "q").unwrap();
            pretrain::contrastive_loss_var(tape, c, q, &anchors, &negs, 0.1).unwrap()
        },
        1e-6,
        64,
        seed,
    )
}

pub fn mlp_head(seed: u64) -> GradReport {
    let mut r = rng::rng(seed);
    let head = MultiLabelHead::new(12, 512, 4, seed).unwrap();
    let clip = FrameClip {
        id: "clip".into(),
        frames: Tensor::randn(&[6, 12], 1.0, &mut r),
        targets: vec![true, false, seed.is_multiple_of(2), true],
    };
    grad_check(&head.params, |tape, st| head.loss(tape, st, &clip).unwrap(), 1e-6, 64, seed)
}
