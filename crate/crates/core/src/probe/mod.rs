//! Layer-wise representation probes: pooled linear classifiers with best-dev
//! selection, the average accuracy curve, and a frame-level multi-label head
//! scored by mean average precision.

pub mod linear;
pub mod map;
pub mod mlp;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use linear::{train_probe, LinearProbe, ProbeMethod, ProbeOptions, Standardizer};
pub use map::{average_precision, mean_average_precision, MapReport};
pub use mlp::{eval_map, mean_frame_loss, train_mlp_head, FrameClip, HeadConfig, MultiLabelHead};

use crate::audio::Spectrogram;
use crate::conformer::{encode, ConformerConfig, LayerActivations};
use crate::error::{Error, Result};
use crate::numerics::{rng, ParamStore};

/// Time-mean clip vectors of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeatures {
    pub layer: i64,
    pub vectors: Vec<Vec<f64>>,
}

pub fn pool(acts: &LayerActivations, layer: i64) -> Result<Vec<f64>> {
    Ok(acts.layer(layer)?.mean_rows())
}

/// Pools every layer, −1 through `num_layers`, of already encoded clips.
pub fn pool_all_layers(acts: &[LayerActivations]) -> Result<Vec<PooledFeatures>> {
    let first = acts.first().ok_or_else(|| Error::contract("no clips to pool"))?;
    let num_layers = first.num_layers();
    if acts.iter().any(|a| a.num_layers() != num_layers) {
        return Err(Error::shape("clips encoded with different depths"));
    }
    first
        .indices()
        .map(|layer| {
            Ok(PooledFeatures {
                layer,
                vectors: acts.iter().map(|a| pool(a, layer)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn extract_pooled(
    cfg: &ConformerConfig,
    params: &ParamStore,
    clips: &[Spectrogram],
    layer: i64,
) -> Result<PooledFeatures> {
    if layer < -1 || layer > cfg.num_layers as i64 {
        return Err(Error::contract(format!(
            "layer {layer} outside -1..={}",
            cfg.num_layers
        )));
    }
    let vectors = clips
        .iter()
        .map(|s| pool(&encode(cfg, params, s)?, layer))
        .collect::<Result<_>>()?;
    Ok(PooledFeatures { layer, vectors })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Stratified assignment: within each class, a shuffled `train_fraction`
/// (at least one item) goes to train, `dev_fraction` to dev, the rest to test.
pub fn stratified_split(labels: &[usize], train_fraction: f64, dev_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && dev_fraction >= 0.0 && train_fraction + dev_fraction <= 1.0) {
        return Err(Error::contract(format!(
            "split fractions train {train_fraction}, dev {dev_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut out = vec![Split::Test; labels.len()];
    for (class, mut idx) in by_class {
        idx.shuffle(&mut rng::rng(rng::derive_seed(seed, class as u64)));
        let n = idx.len() as f64;
        let n_train = ((train_fraction * n).round() as usize).max(1);
        let n_dev = ((dev_fraction * n).round() as usize).min(idx.len() - n_train);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

/// A labelling of the probed clips.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTask {
    pub name: String,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Vec<Split>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub layer: i64,
    pub method: ProbeMethod,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

/// Highest dev accuracy; ties go to the lower layer, then the earlier method.
pub fn select_best(cells: &[ProbeCell]) -> Result<ProbeCell> {
    let mut best = *cells.first().ok_or_else(|| Error::contract("empty probe table"))?;
    for c in &cells[1..] {
        let better = c.dev_accuracy > best.dev_accuracy
            || (c.dev_accuracy == best.dev_accuracy && (c.layer, c.method) < (best.layer, best.method));
        if better {
            best = *c;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracy {
    pub layer: i64,
    pub accuracy: f64,
}

/// Unweighted mean across tasks for each layer in `-1..=num_layers`.
pub fn average_accuracy(per_task: &[BTreeMap<i64, f64>], num_layers: usize) -> Result<Vec<LayerAccuracy>> {
    if per_task.is_empty() {
        return Err(Error::contract("no probe tasks to average"));
    }
    (-1..=num_layers as i64)
        .map(|layer| {
            let mut sum = 0.0;
            for (t, accs) in per_task.iter().enumerate() {
                sum += accs
                    .get(&layer)
                    .ok_or_else(|| Error::contract(format!("task {t} has no accuracy for layer {layer}")))?;
            }
            Ok(LayerAccuracy {
                layer,
                accuracy: sum / per_task.len() as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub num_classes: usize,
    pub table: Vec<ProbeCell>,
    pub selected: ProbeCell,
    /// Test accuracy of the best-dev method at each layer.
    pub per_layer: Vec<LayerAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub num_layers: usize,
    pub tasks: Vec<TaskReport>,
    pub average_curve: Vec<LayerAccuracy>,
}

fn subset(xs: &[Vec<f64>], labels: &[usize], split: &[Split], which: Split) -> (Vec<Vec<f64>>, Vec<usize>) {
    xs.iter()
        .zip(labels)
        .zip(split)
        .filter(|(_, &s)| s == which)
        .map(|((x, &y), _)| (x.clone(), y))
        .unzip()
}

/// Runs every (layer, method) cell of every task and assembles the report.
pub fn run_protocol(
    tasks: &[ProbeTask],
    layers: &[PooledFeatures],
    methods: &[ProbeMethod],
    opts: &ProbeOptions,
    seed: u64,
) -> Result<ProbeReport> {
    if tasks.is_empty() || methods.is_empty() {
        return Err(Error::contract("probe protocol needs tasks and methods"));
    }
    let expected: Vec<i64> = (-1..layers.len() as i64 - 1).collect();
    let got: Vec<i64> = layers.iter().map(|p| p.layer).collect();
    if layers.len() < 2 || got != expected {
        return Err(Error::contract(format!("pooled layers {got:?} are not -1..=L in order")));
    }
    let num_layers = layers.len() - 2;
    let mut reports = Vec::with_capacity(tasks.len());
    for task in tasks {
        let n = task.labels.len();
        if task.split.len() != n || layers.iter().any(|p| p.vectors.len() != n) {
            return Err(Error::contract(format!("task {} does not cover every clip", task.name)));
        }
        let mut table = Vec::new();
        let mut per_layer = Vec::new();
        for pooled in layers {
            let (xtr, ytr) = subset(&pooled.vectors, &task.labels, &task.split, Split::Train);
            let (xdv, ydv) = subset(&pooled.vectors, &task.labels, &task.split, Split::Dev);
            let (xte, yte) = subset(&pooled.vectors, &task.labels, &task.split, Split::Test);
            let mut cells = Vec::new();
            for &method in methods {
                let cell_seed = rng::derive(seed, &format!("{}/{}/{method:?}", task.name, pooled.layer));
                let probe = train_probe(&xtr, &ytr, task.num_classes, method, opts, cell_seed)?;
                cells.push(ProbeCell {
                    layer: pooled.layer,
                    method,
                    dev_accuracy: probe.accuracy(&xdv, &ydv)?,
                    test_accuracy: probe.accuracy(&xte, &yte)?,
                });
            }
            let best = select_best(&cells)?;
            per_layer.push(LayerAccuracy {
                layer: pooled.layer,
                accuracy: best.test_accuracy,
            });
            table.extend(cells);
        }
        reports.push(TaskReport {
            name: task.name.clone(),
            num_classes: task.num_classes,
            selected: select_best(&table)?,
            table,
            per_layer,
        });
    }
    let curves: Vec<BTreeMap<i64, f64>> = reports
        .iter()
        .map(|r| r.per_layer.iter().map(|p| (p.layer, p.accuracy)).collect())
        .collect();
    Ok(ProbeReport {
        num_layers,
        average_curve: average_accuracy(&curves, num_layers)?,
        tasks: reports,
    })
}
