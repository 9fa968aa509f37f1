use deskssl::audio::{Spectrogram, NUM_MEL};
use deskssl::conformer::{encode, subsample, ConformerConfig, Fwd};
use deskssl::numerics::{rng, LrSchedule, Tape, Tensor};
use deskssl::pretrain::{
    self, contrastive_loss, contrastive_loss_var, masked_forward, sample_masks, ContrastiveBatch, MaskSpec,
    PretrainConfig, PretrainModel,
};
use proptest::prelude::*;

fn spec(t: usize, seed: u64) -> Spectrogram {
    Spectrogram::new(Tensor::randn(&[t, NUM_MEL], 1.0, &mut rng::rng(seed))).unwrap()
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

#[test]
fn identical_context_and_orthogonal_negatives() {
    for k in 1..=4usize {
        let c = Tensor::from_rows(&[unit(6, 0)]).unwrap();
        let negs = Tensor::from_rows(&(1..=k).map(|i| unit(6, i)).collect::<Vec<_>>()).unwrap();
        let b = ContrastiveBatch {
            context: c.clone(),
            targets: c,
            negatives: vec![negs],
            temperature: 0.1,
        };
        let expected = -(10f64.exp() / (10f64.exp() + k as f64)).ln();
        assert!((contrastive_loss(&b).unwrap() - expected).abs() < 1e-6);
        assert!((expected - k as f64 * (-10f64).exp()).abs() < 1e-6);
    }
}

#[test]
fn two_way_tie_is_log2() {
    let v = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
    let q = Tensor::from_rows(&[vec![1.0, 0.5, 0.1]]).unwrap();
    let b = ContrastiveBatch {
        context: v,
        targets: q.clone(),
        negatives: vec![q],
        temperature: 0.1,
    };
    assert!((contrastive_loss(&b).unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_norm_is_an_error() {
    let b = ContrastiveBatch {
        context: Tensor::zeros(&[1, 3]),
        targets: Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
        negatives: vec![Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap()],
        temperature: 0.1,
    };
    assert!(contrastive_loss(&b).is_err());
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    let q = tape.constant(Tensor::full(&[3, 2], 1.0));
    assert!(contrastive_loss_var(&mut tape, c, q, &[0, 1], &[vec![1], vec![0]], 0.1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_bounds(seed in 0u64..100_000, k in 1usize..10, m in 1usize..5) {
        let mut r = rng::rng(seed);
        let context = Tensor::randn(&[m, 5], 1.0, &mut r);
        let targets = Tensor::randn(&[m, 5], 1.0, &mut r);
        let negatives: Vec<Tensor> = (0..m).map(|_| Tensor::randn(&[k, 5], 1.0, &mut r)).collect();
        let b = ContrastiveBatch { context: context.clone(), targets, negatives: negatives.clone(), temperature: 0.1 };
        prop_assert!(contrastive_loss(&b).unwrap() >= 0.0);
        // With each target equal to its context, the positive has maximal similarity.
        let best = ContrastiveBatch { context: context.clone(), targets: context, negatives, temperature: 0.1 };
        prop_assert!(contrastive_loss(&best).unwrap() <= ((k + 1) as f64).ln() + 1e-12);
    }
}

#[test]
fn tape_loss_matches_plain_loss() {
    let mut r = rng::rng(4);
    let ctx = Tensor::randn(&[8, 4], 1.0, &mut r);
    let tgt = Tensor::randn(&[8, 4], 1.0, &mut r);
    let anchors = vec![0, 3, 4, 7];
    let negs = pretrain::sample_negatives(&anchors, 8, 3, &mut r).unwrap();
    let mut tape = Tape::new();
    let c = tape.constant(ctx.clone());
    let q = tape.constant(tgt.clone());
    let l = contrastive_loss_var(&mut tape, c, q, &anchors, &negs, 0.1).unwrap();
    let plain = ContrastiveBatch {
        context: ctx.select_rows(&anchors),
        targets: tgt.select_rows(&anchors),
        negatives: negs.iter().map(|n| tgt.select_rows(n)).collect(),
        temperature: 0.1,
    };
    assert!((tape.value(l).item() - contrastive_loss(&plain).unwrap()).abs() < 1e-12);
}

#[test]
fn interior_coverage_matches_analytic_rate() {
    let analytic = 1.0 - 0.935f64.powi(10);
    let (mut covered, mut total) = (0usize, 0usize);
    for seed in 0..10_000 {
        let m = sample_masks(100, 0.065, 10, seed).unwrap();
        covered += m.covered[9..].iter().filter(|&&c| c).count();
        total += 91;
    }
    let frac = covered as f64 / total as f64;
    assert!((frac - analytic).abs() <= 0.02, "{frac} vs {analytic}");
}

#[test]
fn mask_edge_cases() {
    let m = sample_masks(40, 0.0, 10, 2).unwrap();
    assert_eq!(m.span_starts.len(), 1);
    let m = sample_masks(12, 1.0, 10, 2).unwrap();
    assert_eq!(m.num_covered(), 12);
    assert_eq!(sample_masks(50, 0.065, 10, 9).unwrap(), sample_masks(50, 0.065, 10, 9).unwrap());
    let m = MaskSpec::from_starts(8, vec![6], 10).unwrap();
    assert_eq!(m.positions(), vec![6, 7]);
    assert!(MaskSpec::from_starts(8, vec![8], 10).is_err());
}

fn small() -> ConformerConfig {
    let mut c = ConformerConfig::new(2, 16, 4);
    c.dropout = 0.0;
    c
}

#[test]
fn fully_masked_output_ignores_input() {
    for relative in [true, false] {
        let mut cfg = small();
        cfg.relative_attention = relative;
        let store = pretrain::init_params(&cfg, 3).unwrap();
        let run = |seed| {
            let mut tape = Tape::new();
            let mut fwd = Fwd::eval(&mut tape, &store);
            let f = subsample(&mut fwd, &cfg, &spec(40, seed)).unwrap();
            let mask = MaskSpec::from_starts(10, vec![0], 10).unwrap();
            let out = masked_forward(&mut fwd, &cfg, f, &mask).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(1), run(2));
    }
}

#[test]
fn empty_mask_equals_plain_encoding() {
    let cfg = small();
    let store = pretrain::init_params(&cfg, 3).unwrap();
    let s = spec(40, 5);
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, &store);
    let f = subsample(&mut fwd, &cfg, &s).unwrap();
    let mask = MaskSpec::from_starts(10, vec![], 10).unwrap();
    let out = masked_forward(&mut fwd, &cfg, f, &mask).unwrap();
    assert_eq!(tape.value(out), encode(&cfg, &store, &s).unwrap().output());
}

fn synthetic(n: usize, seed: u64) -> Vec<Spectrogram> {
    let spec = deskssl::audio::CorpusSpec::new(n, seed);
    deskssl::audio::corpus_items(&spec)
        .unwrap()
        .iter()
        .map(|it| deskssl::audio::logmel(&it.render(&spec).unwrap()).unwrap().normalized())
        .collect()
}

fn tiny_cfg() -> ConformerConfig {
    let mut c = ConformerConfig::new(2, 32, 4);
    c.dropout = 0.0;
    c
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let data = synthetic(50, 17);
    let cfg = tiny_cfg();
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..3 {
        let mut m = PretrainModel::new(&cfg, seed).unwrap();
        let pc = PretrainConfig::new(200, 2, LrSchedule::transformer(2e-3, 40), seed);
        let curve = pretrain::pretrain(&mut m, &pc, &data).unwrap();
        let pts = curve.points();
        first += pts[..10].iter().map(|p| p.value).sum::<f64>() / 10.0;
        last += pts[pts.len() - 10..].iter().map(|p| p.value).sum::<f64>() / 10.0;
        if seed == 0 {
            let mut again = PretrainModel::new(&cfg, seed).unwrap();
            assert_eq!(pretrain::pretrain(&mut again, &pc, &data).unwrap(), curve);
            assert_eq!(again.params.named_values(), m.params.named_values());
        }
    }
    assert!(last < first, "mean loss {last} not below initial {first}");
}

#[test]
fn saturated_masking_single_utterance() {
    let data = synthetic(1, 5);
    let cfg = tiny_cfg();
    let mut m = PretrainModel::new(&cfg, 1).unwrap();
    let mut pc = PretrainConfig::new(50, 1, LrSchedule::transformer(2e-3, 10), 1);
    pc.mask_start_prob = 1.0;
    let curve = pretrain::pretrain(&mut m, &pc, &data).unwrap();
    let pts = curve.points();
    assert!(pts.iter().all(|p| p.value.is_finite()));
    let head: f64 = pts[..5].iter().map(|p| p.value).sum();
    let tail: f64 = pts[45..].iter().map(|p| p.value).sum();
    assert!(tail < head);
}

#[test]
fn overfits_fixed_batch() {
    let data = synthetic(1, 8);
    let mut cfg = ConformerConfig::new(1, 64, 4);
    cfg.dropout = 0.0;
    let mut m = PretrainModel::new(&cfg, 2).unwrap();
    let pc = PretrainConfig::new(2000, 1, LrSchedule::transformer(1e-3, 100), 2);
    let curve = pretrain::pretrain(&mut m, &pc, &data).unwrap();
    let initial = curve.first().unwrap();
    let pts = curve.points();
    let tail = pts[pts.len() - 20..].iter().map(|p| p.value).sum::<f64>() / 20.0;
    assert!(tail < 0.1 * initial, "final {tail} vs initial {initial}");
}

#[test]
fn exports_encoder_only_checkpoint() {
    let cfg = tiny_cfg();
    let m = PretrainModel::new(&cfg, 1).unwrap();
    let ck = m.export_encoder().unwrap();
    assert!(ck.encoder_only);
    assert!(ck.params.iter().all(|(n, _)| n.starts_with("encoder.")));
    assert!(ck.param(pretrain::MASK_EMBEDDING).is_none());
}
