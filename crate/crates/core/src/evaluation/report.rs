//! Grouped accuracy reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::baselines::TptDiagnostics;
use crate::eraser::Diagnostics;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Outcome for one manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub group: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eraser: Option<Diagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpt: Option<TptDiagnostics>,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.predicted.as_deref() == Some(self.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupReport {
    pub schema_version: String,
    pub method: Method,
    pub model: String,
    pub per_group: BTreeMap<String, GroupStats>,
    /// Correct predictions over all evaluated samples.
    pub avg_accuracy: f64,
    /// Lowest per-group accuracy.
    pub worst_group_accuracy: f64,
    /// Evaluated samples, excluding errored ones.
    pub n: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    /// Ids of samples that failed and were skipped.
    pub errored: Vec<String>,
    /// Per-sample outcomes sorted by id, errored samples included.
    pub samples: Vec<SampleRecord>,
}

impl GroupReport {
    /// Aggregates per-sample records. Records with an error count towards
    /// `errored` only.
    pub fn from_records(
        method: Method,
        model: String,
        seed: u64,
        config_fingerprint: String,
        mut samples: Vec<SampleRecord>,
    ) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut per_group: BTreeMap<String, GroupStats> = BTreeMap::new();
        let mut errored = Vec::new();
        let mut correct = 0;
        let mut n = 0;
        for s in &samples {
            if s.error.is_some() {
                errored.push(s.id.clone());
                continue;
            }
            let g = per_group.entry(s.group.clone()).or_insert(GroupStats {
                correct: 0,
                total: 0,
                accuracy: 0.0,
            });
            g.total += 1;
            n += 1;
            if s.correct() {
                g.correct += 1;
                correct += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("no sample was evaluated successfully"));
        }
        for g in per_group.values_mut() {
            g.accuracy = g.correct as f64 / g.total as f64;
        }
        let worst = per_group.values().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
        Ok(Self {
            schema_version: SCHEMA_VERSION.to_string(),
            method,
            model,
            per_group,
            avg_accuracy: correct as f64 / n as f64,
            worst_group_accuracy: worst,
            n,
            seed,
            config_fingerprint,
            errored,
            samples,
        })
    }

    /// Checks the report's internal consistency.
    pub fn validate(&self, location: &str) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(Error::Validation {
                location: location.to_string(),
                field: field.to_string(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return fail(
                "schema_version",
                format!("expected {SCHEMA_VERSION:?}, got {:?}", self.schema_version),
            );
        }
        if self.per_group.is_empty() {
            return fail("per_group", "no groups".into());
        }
        let mut total = 0;
        let mut correct = 0;
        for (name, g) in &self.per_group {
            let field = format!("per_group.{name}");
            if g.total == 0 || g.correct > g.total {
                return fail(&field, format!("{} correct of {}", g.correct, g.total));
            }
            if g.accuracy != g.correct as f64 / g.total as f64 {
                return fail(&format!("{field}.accuracy"), format!("{} != correct / total", g.accuracy));
            }
            total += g.total;
            correct += g.correct;
        }
        if total != self.n {
            return fail("n", format!("{} but groups sum to {total}", self.n));
        }
        if self.avg_accuracy != correct as f64 / total as f64 {
            return fail("avg_accuracy", format!("{} != correct / n", self.avg_accuracy));
        }
        let worst = self.per_group.values().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
        if self.worst_group_accuracy != worst {
            return fail(
                "worst_group_accuracy",
                format!("{} != minimum group accuracy {worst}", self.worst_group_accuracy),
            );
        }
        if self.worst_group_accuracy > self.avg_accuracy {
            return fail("worst_group_accuracy", "exceeds avg_accuracy".into());
        }
        if self.samples.len() != self.n + self.errored.len() {
            return fail(
                "samples",
                format!("{} records for n = {} plus {} errored", self.samples.len(), self.n, self.errored.len()),
            );
        }
        if !self.samples.windows(2).all(|w| w[0].id < w[1].id) {
            return fail("samples", "records not sorted by unique id".into());
        }
        Ok(())
    }
}

/// Writes the report atomically: a temporary file in the same directory is
/// renamed over `path`.
pub fn write_report(report: &GroupReport, path: &Path) -> Result<()> {
    report.validate(&path.display().to_string())?;
    let mut bytes = serde_json::to_vec_pretty(report).expect("reports serialize");
    bytes.push(b'\n');
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Reads and validates a report.
pub fn read_report(path: &Path) -> Result<GroupReport> {
    let location = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: GroupReport = serde_json::from_str(&text).map_err(|e| Error::parse(&location, &e))?;
    report.validate(&location)?;
    Ok(report)
}
