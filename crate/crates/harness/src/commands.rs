//! Command implementations behind the CLI.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use asyndbt_core::oracle::{enumerate_optimum, exact_gradients, EvaluatorSpec};
use asyndbt_core::simnet::{run, run_centralized, run_synchronous, Trace};
use asyndbt_core::simplex::ProbVector;
use asyndbt_core::Error as CoreError;
use serde::Serialize;

use crate::config::{RunConfig, RunMode};
use crate::evaluator::build_evaluators;
use crate::trace::{compare_lines, parse_header, trace_lines, write_trace_files, ReplayOutcome};

/// Errors carrying their process exit code: 2 config, 3 evaluator,
/// 4 internal invariant violation, 1 replay mismatch.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[source] anyhow::Error),
    #[error("evaluator error: {0}")]
    Evaluator(#[source] anyhow::Error),
    #[error("internal error: {0}")]
    Internal(#[source] anyhow::Error),
    #[error("replay mismatch at record {line}: expected {expected} got {actual}")]
    ReplayMismatch {
        line: usize,
        expected: String,
        actual: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ReplayMismatch { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Evaluator(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

fn core_err(e: CoreError) -> CliError {
    match &e {
        CoreError::Transport { .. } => CliError::Evaluator(anyhow::Error::new(e.clone())),
        _ => CliError::Internal(anyhow::Error::new(e.clone())),
    }
}

/// CLI-level overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub max_iters: Option<u64>,
    pub evaluator_endpoint: Option<String>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(anyhow::anyhow!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text).map_err(CliError::Config)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = overrides.max_iters {
        cfg.run.max_iters = iters;
    }
    if let Some(dir) = &overrides.out_dir {
        cfg.out_dir = Some(dir.display().to_string());
    }
    if let Some(endpoint) = &overrides.evaluator_endpoint {
        cfg.evaluator = match cfg.evaluator {
            EvaluatorSpec::Remote {
                template,
                vocab,
                corpus_path,
                timeout_ms,
                ..
            } => EvaluatorSpec::Remote {
                endpoint: endpoint.clone(),
                template,
                vocab,
                corpus_path,
                timeout_ms,
            },
            _ => EvaluatorSpec::Remote {
                endpoint: endpoint.clone(),
                template: None,
                vocab: vec![],
                corpus_path: None,
                timeout_ms: 30_000,
            },
        };
        cfg.validate().map_err(CliError::Config)?;
    }
    Ok(cfg)
}

/// Execute a configured run (any mode) and return its trace.
pub fn execute(cfg: &RunConfig) -> Result<Trace, CliError> {
    match cfg.mode {
        RunMode::Asyn | RunMode::Sync => {
            let mut evaluators = build_evaluators(&cfg.evaluator, &cfg.shape, cfg.sim.n_benign)
                .map_err(CliError::Evaluator)?;
            let runner = if cfg.mode == RunMode::Asyn {
                run
            } else {
                run_synchronous
            };
            runner(
                &cfg.sim,
                &cfg.inner,
                &cfg.outer,
                &cfg.shape,
                &mut evaluators,
                &cfg.run,
                cfg.seed,
            )
            .map_err(core_err)
        }
        RunMode::Cen => {
            let mut evaluators = build_evaluators(&cfg.evaluator, &cfg.shape, 1)
                .map_err(CliError::Evaluator)?;
            run_centralized(
                &cfg.shape,
                evaluators[0].as_mut(),
                &cfg.outer,
                cfg.sim.refresh_period,
                &cfg.run,
                cfg.seed,
            )
            .map_err(core_err)
        }
    }
}

/// `run`: execute and persist trace files, then report the decoded
/// assignment and final loss on stdout.
pub fn cmd_run(
    config_path: &Path,
    overrides: &Overrides,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load_config(config_path, overrides)?;
    let trace = execute(&cfg)?;
    let dir = overrides
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let (jsonl, csv) = write_trace_files(&dir, &cfg, &trace).map_err(CliError::Internal)?;
    for (worker, decoded) in trace.decoded.iter().enumerate() {
        writeln!(
            out,
            "decoded worker={worker} tokens={:?} demos={:?}",
            decoded.tokens, decoded.demos
        )
        .map_err(|e| CliError::Internal(e.into()))?;
    }
    writeln!(out, "final_loss={}", trace.final_loss)
        .map_err(|e| CliError::Internal(e.into()))?;
    writeln!(out, "iterations={}", trace.iterations)
        .map_err(|e| CliError::Internal(e.into()))?;
    writeln!(out, "clock={}", trace.final_clock).map_err(|e| CliError::Internal(e.into()))?;
    writeln!(out, "trace={}", jsonl.display()).map_err(|e| CliError::Internal(e.into()))?;
    writeln!(out, "summary={}", csv.display()).map_err(|e| CliError::Internal(e.into()))?;
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    optimum_tokens: Vec<usize>,
    optimum_demos: Vec<usize>,
    optimum_loss: f64,
    grad_p: Vec<Vec<f64>>,
    grad_q: Vec<Vec<f64>>,
}

/// `oracle`: enumerate the optimum and print exact gradients at the uniform
/// initialization, as a single JSON object.
pub fn cmd_oracle(
    config_path: &Path,
    overrides: &Overrides,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load_config(config_path, overrides)?;
    if !cfg.shape.enumeration_feasible() {
        return Err(CliError::Config(anyhow::anyhow!(
            "shape too large to enumerate ({} states)",
            cfg.shape.state_count()
        )));
    }
    let mut evaluators =
        build_evaluators(&cfg.evaluator, &cfg.shape, 1).map_err(CliError::Evaluator)?;
    let oracle = evaluators[0].as_mut();
    let (assignment, loss) = enumerate_optimum(oracle).map_err(core_err)?;
    let p: Vec<ProbVector> = (0..cfg.shape.tokens)
        .map(|_| ProbVector::uniform(cfg.shape.vocab))
        .collect();
    let q: Vec<ProbVector> = (0..cfg.shape.demo_slots)
        .map(|_| ProbVector::uniform(cfg.shape.demos_per_slot))
        .collect();
    let (grad_p, grad_q) = exact_gradients(&p, &q, oracle).map_err(core_err)?;
    let report = OracleReport {
        optimum_tokens: assignment.tokens,
        optimum_demos: assignment.demos,
        optimum_loss: loss,
        grad_p,
        grad_q,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    )
    .map_err(|e| CliError::Internal(e.into()))?;
    Ok(())
}

/// `replay`: re-execute the run embedded in a trace file and verify the
/// reproduction is byte-identical.
pub fn cmd_replay(trace_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(trace_path).map_err(|e| {
        CliError::Config(anyhow::anyhow!("cannot read {}: {e}", trace_path.display()))
    })?;
    let original: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    if original.is_empty() {
        return Err(CliError::Config(anyhow::anyhow!("trace file is empty")));
    }
    let header = parse_header(&original[0]).map_err(CliError::Config)?;
    let mut cfg = header.config;
    cfg.seed = header.seed;
    let trace = execute(&cfg)?;
    let reproduced = trace_lines(&cfg, &trace);
    match compare_lines(&original, &reproduced) {
        ReplayOutcome::Identical { records } => {
            writeln!(out, "replay ok: {records} records identical")
                .map_err(|e| CliError::Internal(e.into()))?;
            Ok(())
        }
        ReplayOutcome::Divergent {
            line,
            expected,
            actual,
        } => Err(CliError::ReplayMismatch {
            line,
            expected,
            actual,
        }),
        ReplayOutcome::LengthMismatch {
            original,
            reproduced,
        } => Err(CliError::ReplayMismatch {
            line: original.min(reproduced) + 1,
            expected: format!("{original} records"),
            actual: format!("{reproduced} records"),
        }),
    }
}

/// How the protocol stub prices an assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StubLoss {
    /// A fixed constant.
    Echo,
    /// `0.01 * (sum of token indices + sum of demo indices)`.
    IndexSum,
    /// `0.001 * prompt length`; zero when no prompt is attached.
    PromptLen,
}

#[derive(serde::Deserialize)]
struct StubRequest {
    id: u64,
    #[serde(default)]
    tokens: Vec<usize>,
    #[serde(default)]
    demos: Vec<usize>,
    #[serde(default)]
    prompt: Option<String>,
}

fn stub_price(kind: StubLoss, constant: f64, req: &StubRequest) -> f64 {
    match kind {
        StubLoss::Echo => constant,
        StubLoss::IndexSum => {
            0.01 * (req.tokens.iter().sum::<usize>() + req.demos.iter().sum::<usize>()) as f64
        }
        StubLoss::PromptLen => 0.001 * req.prompt.as_ref().map_or(0, |p| p.len()) as f64,
    }
}

fn stub_serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    kind: StubLoss,
    constant: f64,
    shuffle_window: usize,
) -> anyhow::Result<()> {
    let mut window: Vec<(u64, f64)> = Vec::new();
    let flush_window = |w: &mut W, window: &mut Vec<(u64, f64)>| -> anyhow::Result<()> {
        // Reversed on purpose: exercises out-of-order delivery.
        while let Some((id, loss)) = window.pop() {
            writeln!(w, "{{\"id\":{id},\"loss\":{loss}}}")?;
        }
        w.flush()?;
        Ok(())
    };
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: StubRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let loss = stub_price(kind, constant, &req);
        window.push((req.id, loss));
        if window.len() >= shuffle_window.max(1) {
            flush_window(&mut writer, &mut window)?;
        }
    }
    flush_window(&mut writer, &mut window)?;
    Ok(())
}

/// `stub`: a reference protocol peer for tests and experiments. Serves
/// stdio by default or accepts TCP connections in sequence.
pub fn cmd_stub(
    listen: Option<&str>,
    kind: StubLoss,
    constant: f64,
    shuffle_window: usize,
) -> Result<(), CliError> {
    match listen {
        None => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            stub_serve(
                stdin.lock(),
                stdout.lock(),
                kind,
                constant,
                shuffle_window,
            )
            .map_err(CliError::Internal)
        }
        Some(addr) => {
            let addr = addr.strip_prefix("tcp:").unwrap_or(addr);
            let listener = std::net::TcpListener::bind(addr)
                .map_err(|e| CliError::Config(anyhow::anyhow!("cannot bind {addr}: {e}")))?;
            for stream in listener.incoming() {
                let stream = stream.map_err(|e| CliError::Internal(e.into()))?;
                let reader = BufReader::new(stream.try_clone().map_err(|e| {
                    CliError::Internal(e.into())
                })?);
                let _ = stub_serve(reader, stream, kind, constant, shuffle_window);
            }
            Ok(())
        }
    }
}
