//! Trace files: a JSONL stream (header, events, final summary) and a
//! plot-ready CSV.
//!
//! The header embeds the fully materialized config, its hash and the seed,
//! so a trace file alone is enough to re-execute the run. Replay
//! re-serializes the re-executed run and compares line by line.

use std::fmt::Write as _;
use std::path::Path;

use asyndbt_core::simnet::{Trace, TraceEvent};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceHeader {
    pub r#type: String,
    pub version: u32,
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceFinal {
    pub r#type: String,
    pub iterations: u64,
    pub final_clock: f64,
    pub final_loss: f64,
    pub stop: asyndbt_core::simnet::StopReason,
    pub final_consensus: Vec<Vec<f64>>,
    pub decoded: Vec<asyndbt_core::oracle::DiscreteAssignment>,
}

/// Serialize one run to its canonical JSONL lines.
pub fn trace_lines(config: &RunConfig, trace: &Trace) -> Vec<String> {
    let mut lines = Vec::with_capacity(trace.events.len() + 2);
    let header = TraceHeader {
        r#type: "header".into(),
        version: TRACE_VERSION,
        mode: trace.mode.clone(),
        seed: trace.seed,
        config_hash: config.config_hash(),
        config: config.clone(),
    };
    lines.push(serde_json::to_string(&header).expect("header serializes"));
    for event in &trace.events {
        lines.push(serde_json::to_string(event).expect("event serializes"));
    }
    let footer = TraceFinal {
        r#type: "final".into(),
        iterations: trace.iterations,
        final_clock: trace.final_clock,
        final_loss: trace.final_loss,
        stop: trace.stop,
        final_consensus: trace.final_consensus.clone(),
        decoded: trace.decoded.clone(),
    };
    lines.push(serde_json::to_string(&footer).expect("footer serializes"));
    lines
}

/// Summary CSV: one row per iteration. The residual column is the summed
/// consensus residual across slots (empty in centralized mode), accuracy is
/// the decode-match fraction (empty when enumeration is infeasible).
pub fn summary_csv(trace: &Trace) -> String {
    let mut out = String::from("iteration,clock,loss,residual,planes,accuracy\n");
    for rec in trace.iteration_records() {
        let residual = if rec.consensus_residual.is_empty() {
            String::new()
        } else {
            format!("{}", rec.consensus_residual.iter().sum::<f64>())
        };
        let accuracy = rec
            .decode_match
            .map(|a| format!("{a}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            rec.iteration, rec.clock, rec.loss, residual, rec.active_planes, accuracy
        );
    }
    out
}

pub fn write_trace_files(
    dir: &Path,
    config: &RunConfig,
    trace: &Trace,
) -> anyhow::Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let jsonl_path = dir.join("trace.jsonl");
    let csv_path = dir.join("summary.csv");
    let mut body = trace_lines(config, trace).join("\n");
    body.push('\n');
    std::fs::write(&jsonl_path, body)?;
    std::fs::write(&csv_path, summary_csv(trace))?;
    Ok((jsonl_path, csv_path))
}

/// Outcome of a replay comparison.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplayOutcome {
    Identical { records: usize },
    Divergent { line: usize, expected: String, actual: String },
    LengthMismatch { original: usize, reproduced: usize },
}

pub fn compare_lines(original: &[String], reproduced: &[String]) -> ReplayOutcome {
    for (i, (a, b)) in original.iter().zip(reproduced).enumerate() {
        if a != b {
            return ReplayOutcome::Divergent {
                line: i + 1,
                expected: a.clone(),
                actual: b.clone(),
            };
        }
    }
    if original.len() != reproduced.len() {
        return ReplayOutcome::LengthMismatch {
            original: original.len(),
            reproduced: reproduced.len(),
        };
    }
    ReplayOutcome::Identical {
        records: original.len(),
    }
}

/// Parse the header line of a trace file.
pub fn parse_header(first_line: &str) -> anyhow::Result<TraceHeader> {
    let header: TraceHeader = serde_json::from_str(first_line)?;
    if header.r#type != "header" {
        anyhow::bail!("first record is not a header");
    }
    if header.version != TRACE_VERSION {
        anyhow::bail!(
            "trace version {} not supported (expected {})",
            header.version,
            TRACE_VERSION
        );
    }
    Ok(header)
}

/// Events only, for cross-run comparisons that ignore the mode label.
pub fn event_lines(trace: &Trace) -> Vec<String> {
    trace
        .events
        .iter()
        .map(|e: &TraceEvent| serde_json::to_string(e).expect("event serializes"))
        .collect()
}
