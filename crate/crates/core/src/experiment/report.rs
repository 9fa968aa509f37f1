use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Command;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{Point, Series};

/// Metrics of one run (or one cell of an experiment matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub run_id: String,
    pub command: Command,
    pub config_digest: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub series: BTreeMap<String, Series>,
    #[serde(default)]
    pub summary: BTreeMap<String, f64>,
    /// Command-specific structured results.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl MetricsReport {
    pub fn new(run_id: impl Into<String>, command: Command, config_digest: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            command,
            config_digest: config_digest.into(),
            complete: false,
            error: None,
            series: BTreeMap::new(),
            summary: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn add_series(&mut self, name: impl Into<String>, s: Series) {
        self.series.insert(name.into(), s);
    }

    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.summary.insert(key.into(), value);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fsutil::read_to_string(path)?)?)
    }
}

/// Wall-clock stage durations, kept apart from reports so reruns compare equal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub run_id: String,
    pub stages: Vec<crate::nst::StageTiming>,
}

const SUMMARY_PREFIX: &str = "summary:";

/// Series and summary values of one run recovered from a plot table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotRun {
    pub series: BTreeMap<String, Series>,
    pub summary: BTreeMap<String, f64>,
}

/// Long-format CSV `run,series,step,value`. Summary scalars appear as rows
/// whose series is prefixed `summary:` and whose step is empty. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn emit_plot_data(reports: &[MetricsReport]) -> Result<String> {
    let mut seen = BTreeSet::new();
    for r in reports {
        if !seen.insert(r.run_id.as_str()) {
            return Err(Error::contract(format!("run id {} appears in more than one report", r.run_id)));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::contract(format!("plot table: {e}"));
    w.write_record(["run", "series", "step", "value"]).map_err(csv_err)?;
    for r in reports {
        for (name, s) in &r.series {
            if name.starts_with(SUMMARY_PREFIX) {
                return Err(Error::contract(format!("series name {name} uses the reserved prefix")));
            }
            for p in s.points() {
                w.write_record([r.run_id.as_str(), name, &p.step.to_string(), &p.value.to_string()])
                    .map_err(csv_err)?;
            }
        }
        for (key, v) in &r.summary {
            let name = format!("{SUMMARY_PREFIX}{key}");
            w.write_record([r.run_id.as_str(), &name, "", &v.to_string()]).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(format!("plot table: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::contract(format!("plot table: {e}")))
}

pub fn parse_plot_data(text: &str) -> Result<BTreeMap<String, PlotRun>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::contract(format!("plot table: {e}")))?;
    if header != vec!["run", "series", "step", "value"] {
        return Err(Error::contract(format!("unexpected plot table header {header:?}")));
    }
    let mut points: BTreeMap<String, BTreeMap<String, Vec<Point>>> = BTreeMap::new();
    let mut runs: BTreeMap<String, PlotRun> = BTreeMap::new();
    for (i, rec) in rd.records().enumerate() {
        let bad = |m: String| Error::Parse {
            path: "plot table".into(),
            line: i + 2,
            message: m,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let (run, series, step, value) = (&rec[0], &rec[1], &rec[2], &rec[3]);
        let value: f64 = value.parse().map_err(|e| bad(format!("value {value:?}: {e}")))?;
        let entry = runs.entry(run.to_string()).or_default();
        if let Some(key) = series.strip_prefix(SUMMARY_PREFIX) {
            if !step.is_empty() {
                return Err(bad("summary rows carry no step".into()));
            }
            entry.summary.insert(key.to_string(), value);
        } else {
            let step: u64 = step.parse().map_err(|e| bad(format!("step {step:?}: {e}")))?;
            points
                .entry(run.to_string())
                .or_default()
                .entry(series.to_string())
                .or_default()
                .push(Point { step, value });
        }
    }
    for (run, by_series) in points {
        let entry = runs.entry(run).or_default();
        for (name, pts) in by_series {
            entry.series.insert(name, Series::from_points(pts)?);
        }
    }
    Ok(runs)
}
