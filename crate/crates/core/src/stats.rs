//! Descriptive statistics for latency summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::pipeline::LatencyTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for n < 2.
    pub stddev: f64,
    pub min: u64,
    pub max: u64,
    pub p50: u64,
    pub p95: u64,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Stats {
    pub fn of(values: &[u64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let sum: u128 = sorted.iter().map(|&v| u128::from(v)).sum();
        let mean = sum as f64 / n as f64;
        let stddev = if n < 2 {
            0.0
        } else {
            let ss: f64 = sorted.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        Some(Self {
            n,
            mean,
            stddev,
            min: sorted[0],
            max: sorted[n - 1],
            p50: percentile(&sorted, 50.0),
            p95: percentile(&sorted, 95.0),
        })
    }
}

pub const TRACE_FIELDS: [&str; 6] = [
    "stt_ms",
    "llm_ms",
    "tts_first_chunk_ms",
    "tts_total_ms",
    "end_to_end_ms",
    "time_to_first_audio_ms",
];

pub fn trace_field(trace: &LatencyTrace, field: &str) -> u64 {
    match field {
        "stt_ms" => trace.stt_ms,
        "llm_ms" => trace.llm_ms,
        "tts_first_chunk_ms" => trace.tts_first_chunk_ms,
        "tts_total_ms" => trace.tts_total_ms,
        "end_to_end_ms" => trace.end_to_end_ms,
        "time_to_first_audio_ms" => trace.time_to_first_audio_ms,
        other => panic!("unknown trace field {other}"),
    }
}

/// Per-field statistics over a set of traces, keyed by field name.
pub fn summarize(traces: &[LatencyTrace]) -> BTreeMap<String, Stats> {
    TRACE_FIELDS
        .iter()
        .filter_map(|f| {
            let values: Vec<u64> = traces.iter().map(|t| trace_field(t, f)).collect();
            Stats::of(&values).map(|s| (f.to_string(), s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=20).collect();
        assert_eq!(percentile(&v, 50.0), 10);
        assert_eq!(percentile(&v, 95.0), 19);
        assert_eq!(percentile(&[7], 95.0), 7);
    }

    #[test]
    fn sample_stddev() {
        let s = Stats::of(&[2, 4, 4, 4, 5, 5, 7, 9]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert!((s.stddev - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stats::of(&[3]).unwrap().stddev, 0.0);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn constant_traces() {
        let t = LatencyTrace::from_stages(1200, 2900, 7500, 7500);
        let s = summarize(&[t; 10]);
        assert_eq!(s["end_to_end_ms"].mean, 11600.0);
        assert_eq!(s["end_to_end_ms"].stddev, 0.0);
    }
}
