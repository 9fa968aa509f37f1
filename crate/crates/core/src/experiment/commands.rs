use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::{ExperimentConfig, ProbeSection, ProbeTaskKind};
use super::Context;
use crate::asr::{
    beam_decode_fused, decode_records_to_jsonl, fused_score, greedy_decode, tune_fusion, wer, AsrModel,
    CharNgramLm, DecodeRecord, DevLogits, FusionParams, FusionSearchConfig, InitMode,
};
use crate::audio::{read_manifest, word_count, write_corpus, Manifest, ManifestEntry, Vocabulary};
use crate::conformer::{encode, ConformerConfig, LayerActivations};
use crate::data::{load_entries, load_labeled, load_manifest, LabeledUtterance};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::Series;
use crate::nst::{run_generation, NstConfig, NstInputs, StudentInit};
use crate::numerics::{rng, Checkpoint};
use crate::pretrain::{pretrain, PretrainModel};
use crate::probe::{
    eval_map, pool_all_layers, run_protocol, stratified_split, train_mlp_head, FrameClip, ProbeTask,
};

/// Inputs resolved and checked before any compute.
pub enum Plan {
    GenCorpus,
    Pretrain {
        manifest: PathBuf,
    },
    Finetune {
        labeled: PathBuf,
        dev: PathBuf,
        pretrained: Option<Checkpoint>,
    },
    Nst {
        labeled: PathBuf,
        unlabeled: PathBuf,
        dev: PathBuf,
        teacher: Checkpoint,
        pretrained: Option<Checkpoint>,
    },
    Probe {
        manifest: PathBuf,
        checkpoint: Option<Checkpoint>,
    },
    Evaluate {
        checkpoint: Checkpoint,
        manifest: PathBuf,
        tune: PathBuf,
        lm: PathBuf,
    },
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// Resolves `p` against `base` and requires an existing file.
fn input_file(base: &Path, field: &str, p: &Path) -> Result<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.is_file() {
        return Err(config_err(field, format!("file not found: {}", full.display())));
    }
    Ok(full)
}

fn labeled_manifest(base: &Path, field: &str, p: &Path) -> Result<PathBuf> {
    let full = input_file(base, field, p)?;
    let m = read_manifest(&full)?;
    if m.is_empty() || !m.is_fully_labeled() {
        return Err(config_err(field, "manifest must be non-empty and fully labeled"));
    }
    Ok(full)
}

fn checkpoint(base: &Path, field: &str, p: &Path) -> Result<Checkpoint> {
    let full = input_file(base, field, p)?;
    Checkpoint::load(&full).map_err(|e| config_err(field, e.to_string()))
}

fn check_init(arch: &ConformerConfig, field: &str, mode: InitMode, ck: &Checkpoint) -> Result<()> {
    AsrModel::initialise(arch, mode, Some(ck), 0)
        .map(|_| ())
        .map_err(|e| config_err(field, e.to_string()))
}

pub fn prepare(cfg: &ExperimentConfig, base: &Path) -> Result<Plan> {
    let arch = cfg.architecture();
    arch.validate().map_err(|e| config_err("model", e.to_string()))?;
    use super::config::Command::*;
    Ok(match cfg.command {
        GenCorpus => {
            let c = cfg.corpus()?;
            if c.num_utterances == 0 {
                return Err(config_err("corpus.num_utterances", "must be >= 1"));
            }
            c.spec(1, 0).validate().map_err(|e| config_err("corpus", e.to_string()))?;
            Plan::GenCorpus
        }
        Pretrain => {
            let p = cfg.pretrain()?;
            p.config(0).validate().map_err(|e| config_err("pretrain", e.to_string()))?;
            Plan::Pretrain {
                manifest: input_file(base, "pretrain.manifest", &p.manifest)?,
            }
        }
        Finetune => {
            let f = cfg.finetune()?;
            f.train.config(0).validate().map_err(|e| config_err("finetune.train", e.to_string()))?;
            if f.label_fractions.is_empty() || f.label_fractions.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                return Err(config_err("finetune.label_fractions", "need fractions in (0, 1]"));
            }
            if f.inits.is_empty() || f.inits.iter().enumerate().any(|(i, m)| f.inits[..i].contains(m)) {
                return Err(config_err("finetune.inits", "need distinct init modes"));
            }
            let labeled = labeled_manifest(base, "finetune.labeled_manifest", &f.labeled_manifest)?;
            let dev = labeled_manifest(base, "finetune.dev_manifest", &f.dev_manifest)?;
            let needs_ckpt: Vec<InitMode> = f.inits.iter().copied().filter(|m| *m != InitMode::Scratch).collect();
            let pretrained = match (&f.pretrained_checkpoint, needs_ckpt.is_empty()) {
                (Some(p), _) => {
                    let ck = checkpoint(base, "finetune.pretrained_checkpoint", p)?;
                    for m in &needs_ckpt {
                        check_init(&arch, "finetune.pretrained_checkpoint", *m, &ck)?;
                    }
                    Some(ck)
                }
                (None, true) => None,
                (None, false) => {
                    return Err(config_err(
                        "finetune.pretrained_checkpoint",
                        "required by the requested init modes",
                    ))
                }
            };
            Plan::Finetune {
                labeled,
                dev,
                pretrained,
            }
        }
        Nst => {
            let n = cfg.nst()?;
            nst_config(n).validate().map_err(|e| config_err("nst", e.to_string()))?;
            n.train.config(0).validate().map_err(|e| config_err("nst.train", e.to_string()))?;
            let labeled = labeled_manifest(base, "nst.labeled_manifest", &n.labeled_manifest)?;
            let unlabeled = input_file(base, "nst.unlabeled_manifest", &n.unlabeled_manifest)?;
            let dev = labeled_manifest(base, "nst.dev_manifest", &n.dev_manifest)?;
            let teacher = checkpoint(base, "nst.teacher_checkpoint", &n.teacher_checkpoint)?;
            check_init(&arch, "nst.teacher_checkpoint", InitMode::Full, &teacher)?;
            let pretrained = match &n.pretrained_checkpoint {
                Some(p) => {
                    let ck = checkpoint(base, "nst.pretrained_checkpoint", p)?;
                    check_init(&arch, "nst.pretrained_checkpoint", InitMode::EncoderPretrained, &ck)?;
                    Some(ck)
                }
                None => None,
            };
            Plan::Nst {
                labeled,
                unlabeled,
                dev,
                teacher,
                pretrained,
            }
        }
        Probe => {
            let p = cfg.probe()?;
            validate_probe(p, &arch)?;
            let manifest = input_file(base, "probe.manifest", &p.manifest)?;
            let checkpoint = match &p.checkpoint {
                Some(c) => {
                    let ck = checkpoint(base, "probe.checkpoint", c)?;
                    check_init(&arch, "probe.checkpoint", InitMode::EncoderPretrained, &ck)?;
                    Some(ck)
                }
                None => None,
            };
            Plan::Probe { manifest, checkpoint }
        }
        Evaluate => {
            let e = cfg.evaluate()?;
            if e.beam_width == 0 {
                return Err(config_err("evaluate.beam_width", "must be >= 1"));
            }
            if e.fusion_trials == 0 {
                return Err(config_err("evaluate.fusion_trials", "must be >= 1"));
            }
            if e.lm_order == 0 || !(e.lm_smoothing > 0.0) {
                return Err(config_err("evaluate.lm_order", "need lm_order >= 1 and lm_smoothing > 0"));
            }
            let ck = checkpoint(base, "evaluate.checkpoint", &e.checkpoint)?;
            check_init(&arch, "evaluate.checkpoint", InitMode::Full, &ck)?;
            let manifest = labeled_manifest(base, "evaluate.manifest", &e.manifest)?;
            let tune = match &e.tune_manifest {
                Some(t) => labeled_manifest(base, "evaluate.tune_manifest", t)?,
                None => manifest.clone(),
            };
            let lm = input_file(base, "evaluate.lm_manifest", &e.lm_manifest)?;
            if !read_manifest(&lm)?.entries.iter().any(ManifestEntry::is_labeled) {
                return Err(config_err("evaluate.lm_manifest", "no transcripts to estimate the LM from"));
            }
            Plan::Evaluate {
                checkpoint: ck,
                manifest,
                tune,
                lm,
            }
        }
    })
}

fn validate_probe(p: &ProbeSection, arch: &ConformerConfig) -> Result<()> {
    if p.tasks.is_empty() && p.multilabel.is_none() {
        return Err(config_err("probe.tasks", "nothing to probe"));
    }
    if p.methods.is_empty() {
        return Err(config_err("probe.methods", "need at least one method"));
    }
    if !(p.train_fraction > 0.0 && p.dev_fraction > 0.0 && p.train_fraction + p.dev_fraction < 1.0) {
        return Err(config_err(
            "probe.train_fraction",
            "need positive train and dev fractions leaving a test share",
        ));
    }
    if let Some(m) = &p.multilabel {
        if let Some(l) = m.layer {
            if l < -1 || l > arch.num_layers as i64 {
                return Err(config_err("probe.multilabel.layer", format!("outside -1..={}", arch.num_layers)));
            }
        }
        if m.head.hidden_units == 0 || m.head.epochs == 0 || !(m.head.learning_rate > 0.0) {
            return Err(config_err("probe.multilabel.head", "need positive hidden_units, epochs and learning_rate"));
        }
    }
    Ok(())
}

fn nst_config(n: &super::config::NstSection) -> NstConfig {
    NstConfig {
        keep_fraction: n.keep_fraction,
        nst_ratio: n.nst_ratio,
        generations: n.generations,
        promote_student: n.promote_student,
    }
}

pub fn execute(ctx: &mut Context, plan: Plan) -> Result<()> {
    match plan {
        Plan::GenCorpus => gen_corpus(ctx),
        Plan::Pretrain { manifest } => run_pretrain(ctx, &manifest),
        Plan::Finetune {
            labeled,
            dev,
            pretrained,
        } => finetune(ctx, &labeled, &dev, pretrained.as_ref()),
        Plan::Nst {
            labeled,
            unlabeled,
            dev,
            teacher,
            pretrained,
        } => nst(ctx, &labeled, &unlabeled, &dev, &teacher, pretrained),
        Plan::Probe { manifest, checkpoint } => probe(ctx, &manifest, checkpoint.as_ref()),
        Plan::Evaluate {
            checkpoint,
            manifest,
            tune,
            lm,
        } => evaluate(ctx, &checkpoint, &manifest, &tune, &lm),
    }
}

fn seed(ctx: &Context, label: &str) -> u64 {
    rng::derive(ctx.cfg.seed, label)
}

fn gen_corpus(ctx: &mut Context) -> Result<()> {
    let c = ctx.cfg.corpus()?.clone();
    let r = ctx.begin("gen-corpus", None);
    let mut splits = vec![("train", c.num_utterances)];
    if c.dev_utterances > 0 {
        splits.push(("dev", c.dev_utterances));
    }
    let mut manifests = BTreeMap::new();
    for (name, n) in splits {
        let spec = c.spec(n, seed(ctx, &format!("corpus/{name}")));
        let dir = ctx.path(&format!("corpus/{name}"));
        let m = ctx.time(&format!("corpus/{name}"), || write_corpus(&spec, &dir))?;
        let report = ctx.report(r);
        report.set(format!("{name}_utterances"), m.len() as f64);
        report.set(
            format!("{name}_duration_s"),
            m.entries.iter().map(|e| e.duration_s).sum::<f64>(),
        );
        manifests.insert(name, format!("corpus/{name}/manifest.jsonl"));
    }
    ctx.report(r).details = serde_json::json!({ "manifests": manifests });
    ctx.complete(r)
}

fn run_pretrain(ctx: &mut Context, manifest: &Path) -> Result<()> {
    let section = ctx.cfg.pretrain()?.clone();
    let arch = ctx.cfg.architecture();
    let r = ctx.begin("pretrain", None);
    let (utts, skipped) = ctx.time("pretrain/load", || load_manifest(manifest))?;
    ctx.report(r).set("utterances", utts.len() as f64);
    ctx.report(r).set("skipped", skipped.len() as f64);
    if utts.is_empty() {
        return Err(Error::contract("no readable utterances to pre-train on"));
    }
    let specs: Vec<_> = utts.into_iter().map(|u| u.features).collect();
    let mut model = PretrainModel::new(&arch, seed(ctx, "pretrain/init"))?;
    let pcfg = section.config(seed(ctx, "pretrain"));
    let curve = ctx.time("pretrain/train", || pretrain(&mut model, &pcfg, &specs))?;
    let report = ctx.report(r);
    report.set("initial_loss", curve.first().unwrap_or(f64::NAN));
    report.set("final_loss", curve.last().unwrap_or(f64::NAN));
    report.add_series("pretrain/loss", curve);
    model.export_encoder()?.save(&ctx.path("encoder.ckpt"))?;
    ctx.report(r).details = serde_json::json!({ "checkpoint": "encoder.ckpt" });
    ctx.complete(r)
}

/// Writes `entries` as a manifest at `path`, re-pointing audio paths that
/// were relative to `source` so they resolve from the new location.
fn write_derived_manifest(source: &Path, entries: Vec<ManifestEntry>, path: &Path) -> Result<()> {
    let dir = path.parent().ok_or_else(|| Error::contract("manifest path has no directory"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dir = std::fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(entries.len());
    for mut e in entries {
        let audio = Manifest::resolve_audio(source, &e);
        let audio = std::fs::canonicalize(&audio).map_err(|err| Error::io(&audio, err))?;
        let rel = pathdiff::diff_paths(&audio, &dir).unwrap_or(audio);
        e.audio = rel.to_string_lossy().into_owned();
        out.push(e);
    }
    crate::audio::write_manifest(&Manifest::new(out)?, path)
}

fn finetune(ctx: &mut Context, labeled_path: &Path, dev_path: &Path, pretrained: Option<&Checkpoint>) -> Result<()> {
    let section = ctx.cfg.finetune()?.clone();
    let arch = ctx.cfg.architecture();
    let manifest = read_manifest(labeled_path)?;
    let pool = ctx.time("finetune/load", || load_labeled(labeled_path))?;
    let dev = ctx.time("finetune/load-dev", || load_labeled(dev_path))?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng::rng(seed(ctx, "finetune/split")));
    for &fraction in &section.label_fractions {
        let k = ((fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
        let mut chosen: Vec<usize> = order[..k].to_vec();
        chosen.sort_unstable();
        let in_subset: BTreeSet<usize> = chosen.iter().copied().collect();
        let tag = format!("f{fraction}");
        let labeled_rel = format!("splits/labeled-{tag}.jsonl");
        let unlabeled_rel = format!("splits/unlabeled-{tag}.jsonl");
        let (lab, unlab): (Vec<_>, Vec<_>) = manifest
            .entries
            .iter()
            .cloned()
            .enumerate()
            .partition(|(i, _)| in_subset.contains(i));
        write_derived_manifest(labeled_path, lab.into_iter().map(|(_, e)| e).collect(), &ctx.path(&labeled_rel))?;
        let stripped = unlab
            .into_iter()
            .map(|(_, e)| ManifestEntry { transcript: None, ..e })
            .collect();
        write_derived_manifest(labeled_path, stripped, &ctx.path(&unlabeled_rel))?;
        let subset: Vec<LabeledUtterance> = chosen.iter().map(|&i| pool[i].clone()).collect();
        let train_seed = seed(ctx, &format!("finetune/{tag}"));
        for &init in &section.inits {
            let init_name = match init {
                InitMode::Scratch => "scratch",
                InitMode::EncoderPretrained => "encoder-pretrained",
                InitMode::Full => "full",
            };
            let cell = format!("{init_name}-{tag}");
            let r = ctx.begin(&format!("finetune-{cell}"), Some(&cell));
            let ckpt = if init == InitMode::Scratch { None } else { pretrained };
            let mut model = AsrModel::initialise(&arch, init, ckpt, train_seed)?;
            let tcfg = section.train.config(train_seed);
            let log = ctx.time(&format!("finetune/{cell}"), || {
                crate::asr::train_supervised(&mut model, &tcfg, &subset, Some(&dev))
            })?;
            let ckpt_rel = format!("checkpoints/{cell}.ckpt");
            model.to_checkpoint()?.save(&ctx.path(&ckpt_rel))?;
            let report = ctx.report(r);
            report.set("label_fraction", fraction);
            report.set("labeled_utterances", subset.len() as f64);
            report.set("skipped_infeasible", log.skipped_infeasible as f64);
            report.set("final_train_loss", log.loss.last().unwrap_or(f64::NAN));
            report.set("dev_wer", log.eval_wer.last().unwrap_or(f64::NAN));
            report.add_series("train/loss", log.loss);
            report.add_series("dev/wer", log.eval_wer);
            report.details = serde_json::json!({
                "init": init,
                "label_fraction": fraction,
                "checkpoint": ckpt_rel,
                "labeled_manifest": labeled_rel,
                "unlabeled_manifest": unlabeled_rel,
            });
            ctx.complete(r)?;
        }
    }
    Ok(())
}

fn nst(
    ctx: &mut Context,
    labeled_path: &Path,
    unlabeled_path: &Path,
    dev_path: &Path,
    teacher_ckpt: &Checkpoint,
    pretrained: Option<Checkpoint>,
) -> Result<()> {
    let section = ctx.cfg.nst()?.clone();
    let arch = ctx.cfg.architecture();
    let r = ctx.begin("nst", None);
    let labeled = ctx.time("nst/load-labeled", || load_labeled(labeled_path))?;
    let unlabeled_manifest = read_manifest(unlabeled_path)?;
    let (unlabeled, skipped) =
        ctx.time("nst/load-unlabeled", || load_entries(unlabeled_path, &unlabeled_manifest))?;
    let dev = ctx.time("nst/load-dev", || load_labeled(dev_path))?;
    ctx.report(r).set("unlabeled_skipped", skipped.len() as f64);
    let teacher = AsrModel::from_checkpoint(&arch, teacher_ckpt)?;
    let inputs = NstInputs {
        labeled: &labeled,
        unlabeled: &unlabeled,
        dev: &dev,
        student_init: match pretrained {
            Some(c) => StudentInit::Pretrained(c),
            None => StudentInit::Scratch,
        },
        train: section.train.config(seed(ctx, "nst/train")),
    };
    let generations_path = ctx.path("nst_generations.json");
    let outcome = run_generation(&nst_config(&section), teacher, &inputs, Some(&generations_path))?;
    ctx.timings.extend(outcome.report.timings.iter().cloned());
    let gen_report = outcome.report.without_timings();
    fsutil::write_json_atomic(&generations_path, &gen_report)?;

    let by_id: BTreeMap<&str, &ManifestEntry> =
        unlabeled_manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let retained: Vec<ManifestEntry> = outcome
        .retained
        .iter()
        .map(|p| ManifestEntry {
            hypothesis: Some(p.text.clone()),
            loss_per_word: Some(p.loss_per_word),
            ..by_id[p.id.as_str()].clone()
        })
        .collect();
    write_derived_manifest(unlabeled_path, retained, &ctx.path("retained.jsonl"))?;
    outcome.student.to_checkpoint()?.save(&ctx.path("student.ckpt"))?;

    let report = ctx.report(r);
    let mut details = Vec::new();
    for g in &gen_report.generations {
        let p = format!("gen{}", g.generation);
        if let Some(log) = &g.student_log {
            report.add_series(format!("{p}/student/loss"), log.loss.clone());
            report.add_series(format!("{p}/student/dev_wer"), log.eval_wer.clone());
        }
        report.set(format!("{p}/pseudo_labeled"), g.pseudo_labeled as f64);
        report.set(format!("{p}/retained"), g.retained as f64);
        if let Some(w) = g.teacher_dev_wer {
            report.set(format!("{p}/teacher_dev_wer"), w);
        }
        if let Some(w) = g.student_dev_wer {
            report.set(format!("{p}/student_dev_wer"), w);
        }
        details.push(crate::nst::GenerationRecord {
            student_log: None,
            ..g.clone()
        });
    }
    if let Some(first) = gen_report.generations.first().and_then(|g| g.teacher_dev_wer) {
        report.set("teacher_dev_wer", first);
    }
    if let Some(last) = gen_report.generations.last().and_then(|g| g.student_dev_wer) {
        report.set("student_dev_wer", last);
    }
    report.details = serde_json::json!({
        "generations": details,
        "retained_manifest": "retained.jsonl",
        "student_checkpoint": "student.ckpt",
    });
    ctx.complete(r)
}

/// Maps distinct values to dense class ids in ascending value order.
fn dense_labels(values: &[usize]) -> (Vec<usize>, usize) {
    let distinct: Vec<usize> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = values
        .iter()
        .map(|v| distinct.binary_search(v).expect("value is present"))
        .collect();
    (labels, distinct.len())
}

fn probe(ctx: &mut Context, manifest_path: &Path, ckpt: Option<&Checkpoint>) -> Result<()> {
    let section = ctx.cfg.probe()?.clone();
    let arch = ctx.cfg.architecture();
    let r = ctx.begin("probe", None);
    let manifest = read_manifest(manifest_path)?;
    let (utts, skipped) = ctx.time("probe/load", || load_entries(manifest_path, &manifest))?;
    ctx.report(r).set("clips", utts.len() as f64);
    ctx.report(r).set("skipped", skipped.len() as f64);
    if utts.is_empty() {
        return Err(Error::contract("no readable clips to probe"));
    }
    let by_id: BTreeMap<&str, &ManifestEntry> = manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let entries: Vec<&ManifestEntry> = utts.iter().map(|u| by_id[u.id.as_str()]).collect();
    let params = match ckpt {
        Some(c) => AsrModel::initialise(&arch, InitMode::EncoderPretrained, Some(c), seed(ctx, "probe/init"))?.params,
        None => AsrModel::random(&arch, seed(ctx, "probe/init"))?.params,
    };
    let acts: Vec<LayerActivations> = ctx.time("probe/encode", || {
        utts.iter().map(|u| encode(&arch, &params, &u.features)).collect()
    })?;

    let mut tasks = Vec::new();
    for &kind in &section.tasks {
        let raw: Vec<usize> = entries
            .iter()
            .map(|e| match kind {
                ProbeTaskKind::Speaker => e.speaker.map(|s| s as usize).ok_or_else(|| {
                    Error::contract(format!("clip {} has no speaker for the speaker task", e.id))
                }),
                ProbeTaskKind::WordCount => e.transcript.as_deref().map(word_count).ok_or_else(|| {
                    Error::contract(format!("clip {} has no transcript for the word-count task", e.id))
                }),
            })
            .collect::<Result<_>>()?;
        let (labels, num_classes) = dense_labels(&raw);
        if num_classes < 2 {
            return Err(Error::contract(format!("task {} has a single class", kind.name())));
        }
        let split = stratified_split(
            &labels,
            section.train_fraction,
            section.dev_fraction,
            seed(ctx, &format!("probe/split/{}", kind.name())),
        )?;
        tasks.push(ProbeTask {
            name: kind.name().to_string(),
            labels,
            num_classes,
            split,
        });
    }
    let mut details = serde_json::Map::new();
    if !tasks.is_empty() {
        let pooled = pool_all_layers(&acts)?;
        let linear_seed = seed(ctx, "probe/linear");
        let result = ctx.time("probe/linear", || {
            run_protocol(&tasks, &pooled, &section.methods, &section.options, linear_seed)
        })?;
        fsutil::write_json_atomic(&ctx.path("probe_report.json"), &result)?;
        let report = ctx.report(r);
        let curve = |pts: &[crate::probe::LayerAccuracy]| {
            Series::from_points(
                pts.iter()
                    .map(|p| crate::metrics::Point {
                        step: (p.layer + 1) as u64,
                        value: p.accuracy,
                    })
                    .collect(),
            )
        };
        report.add_series("probe/average_accuracy", curve(&result.average_curve)?);
        for t in &result.tasks {
            report.add_series(format!("probe/{}/accuracy", t.name), curve(&t.per_layer)?);
            report.set(format!("{}/selected_layer", t.name), t.selected.layer as f64);
            report.set(format!("{}/selected_dev_accuracy", t.name), t.selected.dev_accuracy);
            report.set(format!("{}/selected_test_accuracy", t.name), t.selected.test_accuracy);
        }
        details.insert("linear".into(), serde_json::to_value(&result)?);
        details.insert("probe_report".into(), "probe_report.json".into());
    }
    if let Some(ml) = &section.multilabel {
        let layer = ml.layer.unwrap_or(arch.num_layers as i64);
        let vocab: Vec<String> = entries
            .iter()
            .filter_map(|e| e.transcript.as_deref())
            .flat_map(|t| t.split_whitespace().map(str::to_string))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if vocab.is_empty() {
            return Err(Error::contract("multi-label probe needs transcripts"));
        }
        let clips: Vec<FrameClip> = utts
            .iter()
            .zip(&acts)
            .zip(&entries)
            .map(|((u, a), e)| {
                let words: BTreeSet<&str> = e.transcript.as_deref().unwrap_or("").split_whitespace().collect();
                Ok(FrameClip {
                    id: u.id.clone(),
                    frames: a.layer(layer)?.clone(),
                    targets: vocab.iter().map(|w| words.contains(w.as_str())).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng::rng(seed(ctx, "probe/multilabel-split")));
        let n_train = (((section.train_fraction + section.dev_fraction) * clips.len() as f64).round() as usize)
            .clamp(1, clips.len().saturating_sub(1).max(1));
        let train: Vec<FrameClip> = order[..n_train].iter().map(|&i| clips[i].clone()).collect();
        let eval: Vec<FrameClip> = order[n_train..].iter().map(|&i| clips[i].clone()).collect();
        let head_seed = seed(ctx, "probe/head");
        let (head, loss) = ctx.time("probe/multilabel-train", || {
            train_mlp_head(&train, vocab.len(), &ml.head, head_seed)
        })?;
        let map = ctx.time("probe/multilabel-eval", || eval_map(&head, &eval))?;
        let report = ctx.report(r);
        report.add_series("multilabel/loss", loss);
        report.set("multilabel/map", map.map);
        report.set("multilabel/excluded_classes", map.excluded.len() as f64);
        details.insert(
            "multilabel".into(),
            serde_json::json!({ "layer": layer, "classes": vocab, "map": map }),
        );
    }
    ctx.report(r).details = serde_json::Value::Object(details);
    ctx.complete(r)
}

fn evaluate(ctx: &mut Context, ckpt: &Checkpoint, manifest: &Path, tune: &Path, lm_path: &Path) -> Result<()> {
    let section = ctx.cfg.evaluate()?.clone();
    let arch = ctx.cfg.architecture();
    let r = ctx.begin("evaluate", None);
    let model = AsrModel::from_checkpoint(&arch, ckpt)?;
    let params = model.eval_params()?;
    let eval = ctx.time("evaluate/load", || load_labeled(manifest))?;
    let tune_set = if tune == manifest {
        eval.clone()
    } else {
        ctx.time("evaluate/load-tune", || load_labeled(tune))?
    };
    let texts: Vec<String> = read_manifest(lm_path)?
        .entries
        .into_iter()
        .filter_map(|e| e.transcript)
        .collect();
    let lm = CharNgramLm::train(&texts, section.lm_order, section.lm_smoothing)?;
    let logits_of = |set: &[LabeledUtterance]| -> Result<Vec<DevLogits>> {
        set.iter()
            .map(|u| {
                Ok(DevLogits {
                    logits: crate::asr::infer_logits(&arch, &params, &u.features)?,
                    reference: u.transcript.clone(),
                })
            })
            .collect()
    };
    let eval_logits = ctx.time("evaluate/logits", || logits_of(&eval))?;
    let tune_logits = if tune == manifest {
        eval_logits.clone()
    } else {
        ctx.time("evaluate/logits-tune", || logits_of(&tune_set))?
    };
    let fusion_seed = seed(ctx, "evaluate/fusion");
    let search = ctx.time("evaluate/tune-fusion", || {
        tune_fusion(
            &tune_logits,
            &lm,
            &FusionSearchConfig {
                trials: section.fusion_trials,
                beam_width: section.beam_width,
                include_baseline: section.include_baseline,
                seed: fusion_seed,
            },
        )
    })?;
    let vocab = Vocabulary::new();
    let plain = FusionParams::new(0.0, 0.0, 1);
    let mut greedy = Vec::with_capacity(eval.len());
    let mut fused = Vec::with_capacity(eval.len());
    ctx.time("evaluate/decode", || {
        for (u, d) in eval.iter().zip(&eval_logits) {
            let g = greedy_decode(&d.logits);
            let text = vocab.decode(&g)?;
            greedy.push(DecodeRecord {
                id: u.id.clone(),
                words: word_count(&text),
                hypothesis: text,
                log_score: fused_score(&d.logits, &lm, &plain, &g)?,
            });
            let f = beam_decode_fused(&d.logits, &lm, &search.best)?;
            let text = vocab.decode(&f)?;
            fused.push(DecodeRecord {
                id: u.id.clone(),
                words: word_count(&text),
                hypothesis: text,
                log_score: fused_score(&d.logits, &lm, &search.best, &f)?,
            });
        }
        Ok(())
    })?;
    fsutil::write_atomic(&ctx.path("decode/greedy.jsonl"), decode_records_to_jsonl(&greedy)?.as_bytes())?;
    fsutil::write_atomic(&ctx.path("decode/fused.jsonl"), decode_records_to_jsonl(&fused)?.as_bytes())?;
    let refs: Vec<&str> = eval.iter().map(|u| u.transcript.as_str()).collect();
    let greedy_wer = wer(&refs, &greedy.iter().map(|d| d.hypothesis.as_str()).collect::<Vec<_>>())?;
    let fused_wer = wer(&refs, &fused.iter().map(|d| d.hypothesis.as_str()).collect::<Vec<_>>())?;
    let report = ctx.report(r);
    report.set("greedy_wer", greedy_wer);
    report.set("fused_wer", fused_wer);
    report.set("fusion_weight", search.best.fusion_weight);
    report.set("non_blank_reward", search.best.non_blank_reward);
    report.set("tune_best_wer", search.best_dev_wer);
    if section.include_baseline {
        report.set("tune_baseline_wer", search.trials[0].dev_wer);
    }
    report.add_series(
        "fusion/trial_wer",
        Series::from_points(
            search
                .trials
                .iter()
                .enumerate()
                .map(|(i, t)| crate::metrics::Point {
                    step: i as u64 + 1,
                    value: t.dev_wer,
                })
                .collect(),
        )?,
    );
    report.details = serde_json::json!({
        "fusion": search,
        "greedy_decodes": "decode/greedy.jsonl",
        "fused_decodes": "decode/fused.jsonl",
    });
    ctx.complete(r)
}
