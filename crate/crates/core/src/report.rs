//! Reading prediction logs back and rendering comparisons.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{expected_calibration_error, ECE_BINS};
use crate::pipeline::PredictionLogRecord;

/// A parsed JSONL prediction log.
#[derive(Debug, Clone)]
pub struct PredictionLog {
    pub name: String,
    pub records: Vec<PredictionLogRecord>,
}

impl PredictionLog {
    pub fn from_reader<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).map_err(|e| Error::MalformedLog {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(PredictionLog { name, records })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file), path)
    }

    pub fn summary(&self) -> Result<LogSummary> {
        let labeled: Vec<_> = self.records.iter().filter(|r| r.label.is_some()).collect();
        let n = labeled.len();
        let rate = |hit: &dyn Fn(&PredictionLogRecord) -> bool| {
            (n > 0).then(|| labeled.iter().filter(|r| hit(r)).count() as f64 / n as f64)
        };
        let ece = if n > 0 {
            let conf: Vec<f64> = labeled.iter().map(|r| r.confidence).collect();
            let ok: Vec<bool> = labeled.iter().map(|r| r.label == Some(r.predicted)).collect();
            Some(expected_calibration_error(&conf, &ok, ECE_BINS)?)
        } else {
            None
        };
        Ok(LogSummary {
            samples: self.records.len(),
            labeled: n,
            accuracy: rate(&|r| r.label == Some(r.predicted)),
            zero_shot_accuracy: rate(&|r| r.label == Some(r.zero_shot)),
            ece,
            final_purity: self.records.iter().rev().find_map(|r| r.cache_purity),
            updates: self.records.iter().filter(|r| r.update).count(),
            merges: self.records.iter().filter(|r| r.merge).count(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSummary {
    pub samples: usize,
    pub labeled: usize,
    pub accuracy: Option<f64>,
    pub zero_shot_accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub final_purity: Option<f64>,
    pub updates: usize,
    pub merges: usize,
}

impl LogSummary {
    fn rows(&self) -> Vec<(&'static str, Option<f64>, bool)> {
        let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
        vec![
            ("samples", Some(self.samples as f64), false),
            ("labeled", Some(self.labeled as f64), false),
            ("top-1 acc (%)", pct(self.accuracy), true),
            ("zero-shot acc (%)", pct(self.zero_shot_accuracy), true),
            ("ECE (%)", pct(self.ece), true),
            ("cache purity (%)", pct(self.final_purity), true),
            ("updates", Some(self.updates as f64), false),
            ("merges", Some(self.merges as f64), false),
        ]
    }
}

fn cell(v: Option<f64>, fractional: bool) -> String {
    match v {
        None => "-".into(),
        Some(x) if fractional => format!("{x:.2}"),
        Some(x) => format!("{x:.0}"),
    }
}

/// Metric-by-log table. With exactly two logs a `delta` column (second minus
/// first) is appended.
pub fn comparison_table(logs: &[PredictionLog]) -> Result<String> {
    let summaries = logs.iter().map(PredictionLog::summary).collect::<Result<Vec<_>>>()?;
    let mut header = vec!["metric".to_string()];
    header.extend(logs.iter().map(|l| l.name.clone()));
    let with_delta = logs.len() == 2;
    if with_delta {
        header.push("delta".into());
    }
    let mut body: Vec<Vec<String>> = Vec::new();
    let per_log: Vec<_> = summaries.iter().map(LogSummary::rows).collect();
    for row in 0..per_log.first().map_or(0, Vec::len) {
        let (label, _, fractional) = per_log[0][row];
        let mut line = vec![label.to_string()];
        line.extend(per_log.iter().map(|rows| cell(rows[row].1, rows[row].2)));
        if with_delta {
            let delta = match (per_log[0][row].1, per_log[1][row].1) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            };
            let text = match delta {
                Some(d) if fractional => format!("{d:+.2}"),
                Some(d) => format!("{d:+.0}"),
                None => "-".into(),
            };
            line.push(text);
        }
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let render = |out: &mut String, cells: &[String]| {
        for (c, text) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{text:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "  {text:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    };
    render(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    render(&mut out, &rule);
    for line in &body {
        render(&mut out, line);
    }
    Ok(out)
}

/// CSV of cache purity every `every` samples, one column per log.
pub fn purity_csv(logs: &[PredictionLog], every: usize) -> String {
    let every = every.max(1);
    let mut out = String::from("samples");
    for log in logs {
        let _ = write!(out, ",{}", log.name);
    }
    out.push('\n');
    let longest = logs.iter().map(|l| l.records.len()).max().unwrap_or(0);
    let mut step = every;
    while step <= longest {
        let _ = write!(out, "{step}");
        for log in logs {
            match log.records.get(step - 1).and_then(|r| r.cache_purity) {
                Some(p) => {
                    let _ = write!(out, ",{p:.6}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
        step += every;
    }
    out
}

/// Disambiguates identical log names by appending their position.
pub fn dedupe_names(logs: &mut [PredictionLog]) {
    let names: Vec<String> = logs.iter().map(|l| l.name.clone()).collect();
    for (i, log) in logs.iter_mut().enumerate() {
        if names.iter().filter(|n| **n == log.name).count() > 1 {
            log.name = format!("{}#{}", log.name, i + 1);
        }
    }
}

/// Opens every path in order.
pub fn open_logs(paths: &[PathBuf]) -> Result<Vec<PredictionLog>> {
    let mut logs = paths.iter().map(|p| PredictionLog::open(p)).collect::<Result<Vec<_>>>()?;
    dedupe_names(&mut logs);
    Ok(logs)
}
