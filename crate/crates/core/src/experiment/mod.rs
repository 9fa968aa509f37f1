//! Config-driven experiment runner: corpus generation, pre-training,
//! fine-tuning matrices, noisy student training, probing and evaluation.
//!
//! A run owns its output directory:
//!
//! ```text
//! out/run.json          effective config, digest, run id, report list
//! out/reports/*.json    one MetricsReport per run or matrix cell
//! out/plot_data.csv     long-format table of every report in the run
//! out/timings.json      wall-clock stage durations
//! ```
//!
//! plus command artifacts (corpora, checkpoints, manifests, decodes).

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    Command, CorpusSection, EvaluateSection, ExperimentConfig, FinetuneSection, MultiLabelSection, NstSection,
    PretrainSection, ProbeSection, ProbeTaskKind, TrainSection,
};
pub use report::{emit_plot_data, parse_plot_data, MetricsReport, PlotRun, Timings};

use crate::conformer::Preset;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::nst::StageTiming;

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
}

impl Overrides {
    /// A preset override also drops any explicit `[model]` architecture.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.preset {
            cfg.preset = p;
            cfg.model = None;
        }
    }
}

/// Identity record written to `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub reports: Vec<String>,
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub reports: Vec<MetricsReport>,
}

/// Loads `config_path`, applies overrides and runs it into `out_dir`.
pub fn run_config_file(config_path: &Path, out_dir: &Path, overrides: &Overrides) -> Result<RunOutcome> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut cfg);
    let base = std::path::absolute(config_path)
        .map_err(|e| Error::io(config_path, e))?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    run(&cfg, &base, out_dir)
}

/// Runs `cfg`, resolving its relative paths against `base_dir`.
///
/// Inputs are validated before any compute. If the command fails part-way,
/// every report in progress is written flagged incomplete and the error is
/// returned.
pub fn run(cfg: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> Result<RunOutcome> {
    let digest = cfg.digest()?;
    let run_id = cfg.base_run_id()?;
    let plan = commands::prepare(cfg, base_dir)?;
    claim_out_dir(out_dir, &digest)?;
    let mut ctx = Context {
        cfg,
        out_dir: out_dir.to_path_buf(),
        run_id,
        digest,
        reports: Vec::new(),
        timings: Vec::new(),
    };
    let result = commands::execute(&mut ctx, plan);
    if let Err(e) = &result {
        for (_, r) in ctx.reports.iter_mut().filter(|(_, r)| !r.complete) {
            r.error = Some(e.to_string());
        }
    }
    ctx.finish(result.is_ok())?;
    result?;
    Ok(RunOutcome {
        out_dir: ctx.out_dir,
        reports: ctx.reports.into_iter().map(|(_, r)| r).collect(),
    })
}

fn claim_out_dir(out_dir: &Path, digest: &str) -> Result<()> {
    let record = out_dir.join("run.json");
    if record.exists() {
        let prev: RunRecord = serde_json::from_str(&fsutil::read_to_string(&record)?)?;
        if prev.config_digest != digest {
            return Err(Error::Config {
                field: "out_dir".into(),
                message: format!(
                    "{} already holds run {} with a different config",
                    out_dir.display(),
                    prev.run_id
                ),
            });
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))
}

/// Mutable state of one run.
pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub digest: String,
    /// Reports with their file stem under `reports/`.
    pub reports: Vec<(String, MetricsReport)>,
    pub timings: Vec<StageTiming>,
}

impl Context<'_> {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    /// Starts a report; `cell` distinguishes matrix cells within the run.
    pub fn begin(&mut self, stem: &str, cell: Option<&str>) -> usize {
        let run_id = match cell {
            Some(c) => format!("{}/{c}", self.run_id),
            None => self.run_id.clone(),
        };
        self.reports
            .push((stem.to_string(), MetricsReport::new(run_id, self.cfg.command, self.digest.clone())));
        self.reports.len() - 1
    }

    pub fn report(&mut self, i: usize) -> &mut MetricsReport {
        &mut self.reports[i].1
    }

    /// Marks report `i` complete and writes it immediately.
    pub fn complete(&mut self, i: usize) -> Result<()> {
        self.reports[i].1.complete = true;
        let (stem, r) = &self.reports[i];
        r.save(&self.out_dir.join("reports").join(format!("{stem}.json")))
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    fn finish(&self, complete: bool) -> Result<()> {
        for (stem, r) in &self.reports {
            r.save(&self.out_dir.join("reports").join(format!("{stem}.json")))?;
        }
        let reports: Vec<MetricsReport> = self.reports.iter().map(|(_, r)| r.clone()).collect();
        fsutil::write_atomic(&self.path("plot_data.csv"), emit_plot_data(&reports)?.as_bytes())?;
        fsutil::write_json_atomic(
            &self.path("timings.json"),
            &Timings {
                run_id: self.run_id.clone(),
                stages: self.timings.clone(),
            },
        )?;
        fsutil::write_json_atomic(
            &self.path("run.json"),
            &RunRecord {
                run_id: self.run_id.clone(),
                config_digest: self.digest.clone(),
                config: self.cfg.clone(),
                reports: self.reports.iter().map(|(s, _)| format!("reports/{s}.json")).collect(),
                complete,
            },
        )
    }
}
