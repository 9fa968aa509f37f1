mod common;

use deskssl::audio::{Spectrogram, NUM_MEL};
use deskssl::conformer::{
    attention_scores, encode, encode_batch, encode_features, init_params, subsample,
    ConformerConfig, Fwd,
};
use deskssl::numerics::{rng, ParamStore, Tape, Tensor};

fn spec(t: usize, seed: u64) -> Spectrogram {
    let mut r = rng::rng(seed);
    Spectrogram::new(Tensor::randn(&[t, NUM_MEL], 1.0, &mut r)).unwrap()
}

fn model(cfg: &ConformerConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_params(cfg, &mut s, &mut rng::rng(seed)).unwrap();
    s
}

#[test]
fn subsampling_lengths() {
    let cfg = ConformerConfig::new(1, 16, 4);
    let store = model(&cfg, 1);
    for (t, expected) in [(100, 25), (4, 1), (9, 3), (13, 4)] {
        let mut tape = Tape::new();
        let mut fwd = Fwd::eval(&mut tape, &store);
        let v = subsample(&mut fwd, &cfg, &spec(t, 2)).unwrap();
        assert_eq!(tape.shape(v), &[expected, 16]);
    }
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, &store);
    assert!(subsample(&mut fwd, &cfg, &spec(3, 2)).is_err());
}

#[test]
fn zero_input_with_zero_convolutions_is_zero() {
    let cfg = ConformerConfig::new(1, 16, 4);
    let mut store = model(&cfg, 1);
    for name in [
        "encoder.subsample.conv1.w",
        "encoder.subsample.conv1.b",
        "encoder.subsample.conv2.w",
        "encoder.subsample.conv2.b",
    ] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let zero = Spectrogram::new(Tensor::zeros(&[40, NUM_MEL])).unwrap();
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, &store);
    let v = subsample(&mut fwd, &cfg, &zero).unwrap();
    assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
}

#[test]
fn zeroed_residual_branches_reduce_block_to_layer_norm() {
    for relative in [true, false] {
        let mut cfg = ConformerConfig::new(1, 16, 4);
        cfg.relative_attention = relative;
        let mut store = model(&cfg, 3);
        for suffix in ["ff1.out", "ff2.out", "mhsa.o", "conv.pw_out"] {
            for p in ["w", "b"] {
                let id = store.id(&format!("encoder.block0.{suffix}.{p}")).unwrap();
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let acts = encode(&cfg, &store, &spec(40, 4)).unwrap();
        let input = acts.layer(-1).unwrap();
        let out = acts.layer(0).unwrap();
        for i in 0..input.rows() {
            let row = input.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            for (x, y) in row.iter().zip(out.row(i)) {
                let expected = (x - mean) / (var + 1e-5).sqrt();
                assert!((expected - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn activations_cover_every_layer_index() {
    let cfg = ConformerConfig::new(3, 16, 4);
    let store = model(&cfg, 5);
    let acts = encode(&cfg, &store, &spec(30, 6)).unwrap();
    let idx: Vec<i64> = acts.indices().collect();
    assert_eq!(idx, vec![-1, 0, 1, 2, 3]);
    for i in idx {
        assert_eq!(acts.layer(i).unwrap().shape(), &[8, 16]);
    }
    assert!(acts.layer(-2).is_err());
    assert!(acts.layer(4).is_err());
    assert_eq!(acts.output(), acts.layer(3).unwrap());
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = ConformerConfig::new(2, 16, 4);
    let store = model(&cfg, 7);
    let s = spec(50, 8);
    let a = encode(&cfg, &store, &s).unwrap();
    let b = encode(&cfg, &store, &s).unwrap();
    for i in a.indices() {
        let (x, y) = (a.layer(i).unwrap(), b.layer(i).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let cfg = ConformerConfig::new(2, 16, 4);
    let store = model(&cfg, 9);
    let batch = vec![spec(20, 1), spec(33, 2), spec(41, 3)];
    let out = encode_batch(&cfg, &store, &batch).unwrap();
    let perm = [2, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| batch[i].clone()).collect();
    let out_p = encode_batch(&cfg, &store, &permuted).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(out_p[k], out[i]);
    }
}

#[test]
fn model_dim_mismatch_is_an_error() {
    let cfg = ConformerConfig::new(1, 16, 4);
    let store = model(&cfg, 1);
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, &store);
    let bad = fwd.constant(Tensor::zeros(&[5, 8]));
    assert!(encode_features(&mut fwd, &cfg, bad, None).is_err());
    let wider = ConformerConfig::new(1, 32, 4);
    assert!(encode(&wider, &store, &spec(20, 1)).is_err());
}

fn scores_for(cfg: &ConformerConfig, store: &ParamStore, x: &Tensor, positions: &[i64]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, store);
    let xv = fwd.constant(x.clone());
    let (scores, _) = attention_scores(&mut fwd, cfg, 0, xv, positions).unwrap();
    scores.iter().map(|&s| tape.value(s).clone()).collect()
}

#[test]
fn relative_scores_are_translation_invariant() {
    let cfg = ConformerConfig::new(1, 16, 4);
    let store = model(&cfg, 11);
    let mut r = rng::rng(12);
    let x = Tensor::randn(&[7, 16], 1.0, &mut r);
    let base: Vec<i64> = (0..7).collect();
    let shifted: Vec<i64> = (0..7).map(|i| i + 13).collect();
    let a = scores_for(&cfg, &store, &x, &base);
    let b = scores_for(&cfg, &store, &x, &shifted);
    assert_eq!(a.len(), 4);
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.shape(), &[7, 7]);
        assert!(p.max_abs_diff(q) <= 1e-5);
    }
}

#[test]
fn absolute_attention_on_identical_tokens_is_uniform() {
    let mut cfg = ConformerConfig::new(1, 16, 4);
    cfg.relative_attention = false;
    let store = model(&cfg, 13);
    let mut r = rng::rng(14);
    let row = Tensor::randn(&[1, 16], 1.0, &mut r);
    let x = Tensor::from_rows(&vec![row.row(0).to_vec(); 6]).unwrap();
    let positions: Vec<i64> = (0..6).collect();
    let mut tape = Tape::new();
    let mut fwd = Fwd::eval(&mut tape, &store);
    let xv = fwd.constant(x);
    let (scores, _) = attention_scores(&mut fwd, &cfg, 0, xv, &positions).unwrap();
    for s in scores {
        let w = tape.softmax_rows(s).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
    }
}

#[test]
fn single_position_attends_with_weight_one() {
    for relative in [true, false] {
        let mut cfg = ConformerConfig::new(1, 16, 4);
        cfg.relative_attention = relative;
        let store = model(&cfg, 15);
        let mut r = rng::rng(16);
        let x = Tensor::randn(&[1, 16], 1.0, &mut r);
        let mut tape = Tape::new();
        let mut fwd = Fwd::eval(&mut tape, &store);
        let xv = fwd.constant(x);
        let (scores, _) = attention_scores(&mut fwd, &cfg, 0, xv, &[0]).unwrap();
        for s in scores {
            let w = tape.softmax_rows(s).unwrap();
            assert_eq!(tape.value(w).data(), &[1.0]);
        }
    }
}
