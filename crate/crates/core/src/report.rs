//! Markdown latency report over session logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{read_session_log, LogRecord, TrialLogEntry};
use crate::pipeline::LatencyTrace;
use crate::stats::{summarize, Stats, TRACE_FIELDS};

type Row = (&'static str, fn(&Stats) -> f64);

pub const MASKING_WINDOWS_MS: [u64; 4] = [0, 1500, 3000, 5600];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no session logs (*.log.jsonl) found under {0}")]
    NoLogsFound(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn collect_logs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .collect::<Result<_, _>>()
        .map_err(io)?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_logs(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(".log.jsonl"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Every trial entry in every session log under `dir`, in path order.
pub fn load_entries(dir: &Path) -> Result<Vec<TrialLogEntry>, ReportError> {
    let mut paths = Vec::new();
    collect_logs(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(ReportError::NoLogsFound(dir.display().to_string()));
    }
    let mut entries = Vec::new();
    for p in paths {
        let records = read_session_log(&p).map_err(|source| ReportError::Io {
            path: p.display().to_string(),
            source,
        })?;
        entries.extend(records.into_iter().filter_map(|r| match r {
            LogRecord::Trial(e) => Some(e),
            _ => None,
        }));
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub all: BTreeMap<String, Stats>,
    pub batch_tta: Option<Stats>,
    pub streaming_tta: Option<Stats>,
    /// `(window, batch mean gap, streaming mean gap)`.
    pub gaps: Vec<(u64, Option<f64>, Option<f64>)>,
    pub runs: usize,
}

fn mean_gap(traces: &[LatencyTrace], window: u64) -> Option<f64> {
    let gaps: Vec<u64> = traces
        .iter()
        .map(|t| crate::pipeline::compute_perceived_gap(t, window))
        .collect();
    Stats::of(&gaps).map(|s| s.mean)
}

impl Report {
    pub fn from_entries(entries: &[TrialLogEntry]) -> Self {
        let (streaming, batch): (Vec<_>, Vec<_>) = entries.iter().partition(|e| e.streaming);
        let traces = |v: &[&TrialLogEntry]| v.iter().map(|e| e.trace).collect::<Vec<_>>();
        let batch = traces(&batch);
        let streaming = traces(&streaming);
        let all: Vec<_> = entries.iter().map(|e| e.trace).collect();
        let tta = |v: &[LatencyTrace]| {
            Stats::of(&v.iter().map(|t| t.time_to_first_audio_ms).collect::<Vec<_>>())
        };
        Self {
            all: summarize(&all),
            batch_tta: tta(&batch),
            streaming_tta: tta(&streaming),
            gaps: MASKING_WINDOWS_MS
                .iter()
                .map(|&w| (w, mean_gap(&batch, w), mean_gap(&streaming, w)))
                .collect(),
            runs: entries.len(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "absent".to_owned(), |x| format!("{x:.1}"));
        let _ = writeln!(md, "# Latency report\n\n{} completed runs.\n", self.runs);

        let _ = writeln!(md, "## Stage latencies (ms)\n");
        let _ = writeln!(md, "| measure | n | mean | stddev | p50 | p95 | min | max |");
        let _ = writeln!(md, "|---|---:|---:|---:|---:|---:|---:|---:|");
        for f in TRACE_FIELDS {
            if let Some(s) = self.all.get(f) {
                let _ = writeln!(
                    md,
                    "| {f} | {} | {:.1} | {:.1} | {} | {} | {} | {} |",
                    s.n, s.mean, s.stddev, s.p50, s.p95, s.min, s.max
                );
            }
        }

        let _ = writeln!(md, "\n## Time to first audio: batch vs streaming (ms)\n");
        let _ = writeln!(md, "| statistic | batch | streaming |");
        let _ = writeln!(md, "|---|---:|---:|");
        let col = |s: &Option<Stats>, f: fn(&Stats) -> f64| fmt_opt(s.as_ref().map(f));
        let rows: [Row; 4] = [
            ("n", |s| s.n as f64),
            ("mean", |s| s.mean),
            ("p50", |s| s.p50 as f64),
            ("p95", |s| s.p95 as f64),
        ];
        for (name, f) in rows {
            let _ = writeln!(
                md,
                "| {name} | {} | {} |",
                col(&self.batch_tta, f),
                col(&self.streaming_tta, f)
            );
        }
        let reduction = match (&self.batch_tta, &self.streaming_tta) {
            (Some(b), Some(s)) => format!("{:.1}", b.mean - s.mean),
            _ => "absent".to_owned(),
        };
        let _ = writeln!(md, "| reduction (mean) | {reduction} | |");

        let _ = writeln!(md, "\n## Perceived gap by masking window (mean ms)\n");
        let _ = writeln!(md, "| window | batch | streaming |");
        let _ = writeln!(md, "|---:|---:|---:|");
        for (w, b, s) in &self.gaps {
            let _ = writeln!(md, "| {w} | {} | {} |", fmt_opt(*b), fmt_opt(*s));
        }
        md
    }
}

pub fn report(dir: &Path) -> Result<Report, ReportError> {
    Ok(Report::from_entries(&load_entries(dir)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::MediationSettings;
    use crate::experiment::default_questionnaire;
    use crate::sim::{simulate, SimConfig};

    fn sim_into(dir: &Path, streaming: bool) {
        let mut cfg = SimConfig {
            participants: 1,
            ..Default::default()
        };
        cfg.settings = MediationSettings {
            streaming,
            ..cfg.settings
        };
        cfg.seed = u64::from(streaming);
        simulate(
            &crate::coordinator::tests::scenarios(),
            &default_questionnaire(),
            &cfg,
            Some(dir),
        )
        .unwrap();
    }

    #[test]
    fn empty_dir_is_no_logs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(ReportError::NoLogsFound(_))));
    }

    #[test]
    fn batch_only_marks_streaming_absent() {
        let dir = tempfile::tempdir().unwrap();
        sim_into(dir.path(), false);
        let r = report(dir.path()).unwrap();
        assert!(r.streaming_tta.is_none());
        let md = r.to_markdown();
        assert!(md.contains("| mean | 11600.0 | absent |"), "{md}");
        assert!(md.contains("| 0 | 11600.0 | absent |"), "{md}");
    }

    #[test]
    fn mixed_logs_show_reduction_and_full_masking() {
        let dir = tempfile::tempdir().unwrap();
        sim_into(&dir.path().join("batch"), false);
        sim_into(&dir.path().join("stream"), true);
        let r = report(dir.path()).unwrap();
        assert!(r.streaming_tta.unwrap().mean < r.batch_tta.unwrap().mean);
        let md = r.to_markdown();
        assert!(md.contains("| mean | 11600.0 | 5600.0 |"), "{md}");
        assert!(md.contains("| reduction (mean) | 6000.0 | |"), "{md}");
        assert!(md.contains("| 3000 | 8600.0 | 2600.0 |"), "{md}");
        assert!(md.contains("| 5600 | 6000.0 | 0.0 |"), "{md}");
    }
}
