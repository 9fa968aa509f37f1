use deskssl::asr::{evaluate_wer, train_supervised, AsrModel, InitMode, SupervisedConfig};
use deskssl::audio::{corpus_items, logmel, write_corpus, write_manifest, CorpusSpec, Manifest, BLANK};
use deskssl::conformer::ConformerConfig;
use deskssl::data::{load_manifest, LabeledUtterance, Utterance};
use deskssl::nst::pseudo_label;
use deskssl::numerics::{LrSchedule, Tensor};
use deskssl::Error;

fn tiny() -> ConformerConfig {
    ConformerConfig {
        subsample_channels: 8,
        ..ConformerConfig::new(2, 32, 4)
    }
}

fn labeled(n: usize, max_words: usize, seed: u64) -> Vec<LabeledUtterance> {
    let spec = CorpusSpec {
        max_words,
        ..CorpusSpec::new(n, seed)
    };
    corpus_items(&spec)
        .unwrap()
        .iter()
        .map(|item| {
            let feats = logmel(&item.render(&spec).unwrap()).unwrap().normalized();
            LabeledUtterance::new(item.id.clone(), feats, item.transcript.clone()).unwrap()
        })
        .collect()
}

fn cfg(steps: u64, batch: usize) -> SupervisedConfig {
    SupervisedConfig {
        steps,
        batch_size: batch,
        encoder_schedule: LrSchedule::constant_with_warmup(3e-3, 50),
        decoder_schedule: LrSchedule::constant_with_warmup(3e-3, 50),
        augment: None,
        ema_decay: None,
        grad_clip: Some(5.0),
        eval_every: 0,
        seed: 3,
    }
}

fn overfit(utts: &[LabeledUtterance], steps: u64) -> AsrModel {
    let mut model = AsrModel::random(&tiny(), 1).unwrap();
    train_supervised(&mut model, &cfg(steps, utts.len()), utts, None).unwrap();
    model
}

#[test]
fn overfits_eight_utterances_to_zero_wer() {
    let utts = labeled(8, 2, 41);
    let model = overfit(&utts, 2000);
    let w = evaluate_wer(&model.cfg, &model.eval_params().unwrap(), &utts).unwrap();
    assert_eq!(w, 0.0);
}

#[test]
fn mismatched_checkpoint_fails_before_any_step() {
    let other = ConformerConfig {
        subsample_channels: 8,
        ..ConformerConfig::new(2, 16, 4)
    };
    let ckpt = AsrModel::random(&other, 0).unwrap().to_checkpoint().unwrap();
    for mode in [InitMode::EncoderPretrained, InitMode::Full] {
        match AsrModel::initialise(&tiny(), mode, Some(&ckpt), 0) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("shape"), "{m}"),
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }
    // A model whose parameters disagree with its config is refused by the trainer itself.
    let mut model = AsrModel::random(&tiny(), 0).unwrap();
    model.params = AsrModel::random(&other, 0).unwrap().params;
    let before = model.params.clone();
    let utts = labeled(2, 2, 1);
    assert!(train_supervised(&mut model, &cfg(1, 1), &utts, None).is_err());
    assert_eq!(model.params.named_values(), before.named_values());
}

#[test]
fn metrics_log_has_monotone_steps() {
    let utts = labeled(4, 2, 9);
    let mut model = AsrModel::random(&tiny(), 2).unwrap();
    let c = SupervisedConfig {
        eval_every: 3,
        ..cfg(7, 2)
    };
    let log = train_supervised(&mut model, &c, &utts, Some(&utts)).unwrap();
    let steps: Vec<u64> = log.loss.points().iter().map(|p| p.step).collect();
    assert_eq!(steps, (1..=7).collect::<Vec<_>>());
    let evals: Vec<u64> = log.eval_wer.points().iter().map(|p| p.step).collect();
    assert_eq!(evals, vec![3, 6, 7]);
    assert!(log.loss.points().iter().all(|p| p.value.is_finite()));
}

fn unlabeled(utts: &[LabeledUtterance]) -> Vec<Utterance> {
    utts.iter()
        .map(|u| Utterance {
            id: u.id.clone(),
            features: u.features.clone(),
            transcript: None,
        })
        .collect()
}

#[test]
fn overfit_teacher_reproduces_its_transcript() {
    let utts = labeled(1, 3, 77);
    let teacher = overfit(&utts, 400);
    let pl = pseudo_label(&teacher, &unlabeled(&utts)).unwrap();
    assert_eq!(pl.len(), 1);
    assert_eq!(pl[0].text, utts[0].transcript);
    assert!(pl[0].loss_per_word < 0.05, "loss per word {}", pl[0].loss_per_word);
}

#[test]
fn empty_hypothesis_uses_divisor_one() {
    let utts = labeled(2, 2, 5);
    let mut teacher = AsrModel::random(&tiny(), 4).unwrap();
    let id = teacher.params.expect_id("decoder.out.b").unwrap();
    let bias = teacher.params.get_mut(id);
    let mut b = bias.data().to_vec();
    b[BLANK] = 1e3;
    *bias = Tensor::vector(b);
    let pl = pseudo_label(&teacher, &unlabeled(&utts)).unwrap();
    for p in &pl {
        assert!(p.hypothesis.is_empty() && p.text.is_empty());
        assert!(p.loss_per_word.is_finite() && p.loss_per_word >= 0.0);
        // Loss of the all-blank path, undivided.
        let logits = teacher.logits(&utts.iter().find(|u| u.id == p.id).unwrap().features).unwrap();
        let loss = deskssl::asr::ctc_loss(&logits, &p.hypothesis).unwrap().loss;
        assert_eq!(p.loss_per_word, loss);
    }
}

#[test]
fn unreadable_audio_is_skipped_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    let m = write_corpus(&CorpusSpec::new(5, 8), tmp.path()).unwrap();
    std::fs::remove_file(Manifest::resolve_audio(&tmp.path().join("manifest.jsonl"), &m.entries[1])).unwrap();
    std::fs::write(Manifest::resolve_audio(&tmp.path().join("manifest.jsonl"), &m.entries[3]), b"not a wav").unwrap();
    let path = tmp.path().join("manifest.jsonl");
    write_manifest(&m, &path).unwrap();
    let (utts, skipped) = load_manifest(&path).unwrap();
    assert_eq!(utts.len(), m.len() - skipped.len());
    let skipped_ids: Vec<&str> = skipped.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(skipped_ids, vec![m.entries[1].id.as_str(), m.entries[3].id.as_str()]);
    let teacher = AsrModel::random(&tiny(), 0).unwrap();
    assert_eq!(pseudo_label(&teacher, &utts).unwrap().len(), 3);
}
