//! Line-delimited JSON manifests.
//!
//! One record per line: `id`, `audio`, optional `transcript`, `duration_s`,
//! plus optional generator and pseudo-labeling fields.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_per_word: Option<f64>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, audio: impl Into<String>, duration_s: f64) -> Self {
        Self {
            id: id.into(),
            audio: audio.into(),
            transcript: None,
            duration_s,
            speaker: None,
            hypothesis: None,
            loss_per_word: None,
        }
    }

    pub fn with_transcript(mut self, t: impl Into<String>) -> Self {
        self.transcript = Some(t.into());
        self
    }

    pub fn is_labeled(&self) -> bool {
        self.transcript.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        for (i, e) in m.entries.iter().enumerate() {
            validate_entry(e).map_err(|msg| Error::Parse {
                path: "<memory>".into(),
                line: i + 1,
                message: msg,
            })?;
        }
        m.check_unique("<memory>")?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.entries.iter().all(ManifestEntry::is_labeled)
    }

    fn check_unique(&self, path: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: format!("duplicate utterance id {:?}", e.id),
                });
            }
        }
        Ok(())
    }

    /// Audio path resolved against the manifest's directory.
    pub fn resolve_audio(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.audio);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                message,
            };
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            validate_entry(&e).map_err(parse_err)?;
            entries.push((i + 1, e));
        }
        let mut seen = HashSet::new();
        for (line, e) in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: *line,
                    message: format!("duplicate utterance id {:?}", e.id),
                });
            }
        }
        Ok(Self {
            entries: entries.into_iter().map(|(_, e)| e).collect(),
        })
    }
}

fn validate_entry(e: &ManifestEntry) -> std::result::Result<(), String> {
    if e.id.is_empty() {
        return Err("empty utterance id".into());
    }
    if !(e.duration_s > 0.0) || !e.duration_s.is_finite() {
        return Err(format!("duration_s must be positive, got {}", e.duration_s));
    }
    if matches!(&e.transcript, Some(t) if t.is_empty()) {
        return Err("labeled entry has an empty transcript".into());
    }
    if matches!(e.loss_per_word, Some(l) if !(l >= 0.0 && l.is_finite())) {
        return Err("loss_per_word must be finite and non-negative".into());
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = read_to_string(path)?;
    Manifest::parse(&text, &path.display().to_string())
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    write_atomic(path, manifest.to_text()?.as_bytes())
}
