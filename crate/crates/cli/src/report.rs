//! Versioned JSON reports and their plain-text table views.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sgnet_core::metrics::{CohortMeans, SubjectMetrics};
use sgnet_core::stats::Summary;
use sgnet_core::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub model: String,
    pub split: String,
    pub subjects: Vec<SubjectMetrics>,
    pub cohort: CohortMeans,
    /// Mean, SD and 95% CI of per-subject Dice; absent for fewer than 2 subjects.
    pub dice_summary: Option<Summary>,
    pub hd95_summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub dice: Summary,
    pub precision: f64,
    pub recall: f64,
    pub hd95: f64,
}

/// JSON has no infinities; a zero-variance comparison stores `t` as `"inf"` / `"-inf"`.
mod signed_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid t statistic {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub reference: String,
    #[serde(with = "signed_inf")]
    pub t: f64,
    pub df: usize,
    pub p_raw: f64,
    pub p_bonferroni: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub metric: String,
    pub reference: String,
    pub comparisons_k: usize,
    pub models: Vec<ModelRow>,
    pub comparisons: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadoxRow {
    pub id: String,
    pub base: SubjectMetrics,
    pub dilated: SubjectMetrics,
    pub delta_dice: f64,
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_hd95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadoxReport {
    pub schema_version: u32,
    pub source: String,
    pub dilation_radius: usize,
    pub subjects: Vec<ParadoxRow>,
    pub mean_delta_dice: f64,
    pub mean_delta_precision: f64,
    pub mean_delta_recall: f64,
    pub mean_delta_hd95: f64,
}

/// Location of the table view that accompanies a JSON report.
pub fn table_path(report: &Path) -> PathBuf {
    report.with_extension("txt")
}

/// Writes pretty JSON to `path` and the table next to it.
pub fn write_report<T: Serialize>(value: &T, table: &str, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("serializing report: {e}")))?;
    json.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let tp = table_path(path);
    fs::write(&tp, table).map_err(|e| Error::io(&tp, e))
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: not a JSON report: {e}", path.display())))?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(s) if s == SCHEMA_VERSION as u64 => {}
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported report schema version {other:?} (expected {SCHEMA_VERSION})",
                path.display()
            )))
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Data(format!("{}: malformed report: {e}", path.display())))
}

fn flags(s: &SubjectMetrics) -> String {
    let mut f = Vec::new();
    if s.precision_undefined {
        f.push("no-pred");
    }
    if s.recall_undefined {
        f.push("no-gt");
    }
    if s.hd95_sentinel {
        f.push("hd95-sentinel");
    }
    f.join(",")
}

pub fn evaluation_table(r: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model: {}  split: {}  subjects: {}", r.model, r.split, r.subjects.len());
    let _ = writeln!(
        out,
        "{:<12} {:>8} {:>10} {:>8} {:>10}  {}",
        "subject", "dice", "precision", "recall", "hd95_mm", "flags"
    );
    for s in &r.subjects {
        let _ = writeln!(
            out,
            "{:<12} {:>8.4} {:>10.4} {:>8.4} {:>10.2}  {}",
            s.id,
            s.dice,
            s.precision,
            s.recall,
            s.hd95,
            flags(s)
        );
    }
    let c = &r.cohort;
    let _ = writeln!(
        out,
        "{:<12} {:>8.4} {:>10.4} {:>8.4} {:>10.2}",
        "mean", c.dice, c.precision, c.recall, c.hd95
    );
    if let Some(d) = &r.dice_summary {
        let _ = writeln!(out, "dice {:.2} ± {:.2} [{:.2}, {:.2}]", d.mean, d.sd, d.ci_low, d.ci_high);
    }
    out
}

pub fn comparison_table(r: &ComparisonReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<26} {:>10} {:>8} {:>10} {:>12}",
        "model", "dice (mean ± sd [95% CI])", "precision", "recall", "hd95_mm", "p vs ref"
    );
    for m in &r.models {
        let d = &m.dice;
        let cell = format!("{:.2} ± {:.2} [{:.2}, {:.2}]", d.mean, d.sd, d.ci_low, d.ci_high);
        let p = r
            .comparisons
            .iter()
            .find(|c| c.model == m.model)
            .map(|c| format!("{:.4}{}", c.p_bonferroni, if c.significant { "*" } else { "" }))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<10} {:<26} {:>10.4} {:>8.4} {:>10.2} {:>12}",
            m.model, cell, m.precision, m.recall, m.hd95, p
        );
    }
    let _ = writeln!(
        out,
        "paired two-sided t-tests on {} vs {}, Bonferroni k = {}; * p < 0.05",
        r.metric, r.reference, r.comparisons_k
    );
    out
}

pub fn paradox_table(r: &ParadoxReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "source: {}  dilation radius: {} voxels", r.source, r.dilation_radius);
    let _ = writeln!(
        out,
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>10} {:>10}",
        "subject", "recall", "recall'", "prec", "prec'", "hd95", "hd95'"
    );
    for s in &r.subjects {
        let _ = writeln!(
            out,
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.2} {:>10.2}",
            s.id, s.base.recall, s.dilated.recall, s.base.precision, s.dilated.precision, s.base.hd95, s.dilated.hd95
        );
    }
    let _ = writeln!(
        out,
        "mean deltas: dice {:+.4}  precision {:+.4}  recall {:+.4}  hd95 {:+.2}",
        r.mean_delta_dice, r.mean_delta_precision, r.mean_delta_recall, r.mean_delta_hd95
    );
    out
}
