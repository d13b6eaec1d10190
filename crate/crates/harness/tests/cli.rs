//! Binary-level checks: exit codes, file outputs, replay, the oracle
//! report, and the wire protocol against stub peers.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Stdio};

use asyndbt_core::oracle::{DiscreteAssignment, EvaluatorSpec, LossOracle, ProblemShape};
use asyndbt_harness::evaluator::RemoteEvaluator;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_asyndbt")
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn tiny_config() -> &'static str {
    r#"{
        "shape": {"tokens": 1, "vocab": 3, "demo_slots": 1, "demos_per_slot": 2},
        "evaluator": {"kind": "separable-synthetic",
                      "token_scores": [[0.8, 0.1, 0.5]],
                      "demo_scores": [[0.4, 0.2]]},
        "sim": {"n_benign": 2, "n_byzantine": 0, "max_staleness": 3,
                "refresh_period": 5, "prune_threshold": 0.001, "epsilon": 0.05,
                "reachability": {"model": "bernoulli", "probability": 0.9},
                "demo_rule": "sample"},
        "run": {"max_iters": 40, "early_stop": null, "mc_loss_samples": 64,
                "record_planes": true},
        "seed": 11
    }"#
}

#[test]
fn run_writes_trace_files_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", tiny_config());
    let out = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run1"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("decoded worker=0"));
    assert!(stdout.contains("final_loss="));
    assert!(dir.path().join("run1/trace.jsonl").exists());
    assert!(dir.path().join("run1/summary.csv").exists());

    let csv = std::fs::read_to_string(dir.path().join("run1/summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,clock,loss,residual,planes,accuracy"
    );
    assert_eq!(lines.count(), 40);
}

#[test]
fn centralized_mode_has_no_residual_column_values() {
    let dir = tempfile::tempdir().unwrap();
    let body = tiny_config().replace("\"seed\": 11", "\"seed\": 11, \"mode\": \"cen\"");
    let cfg = write_config(dir.path(), "cfg.json", &body);
    let out = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("cen"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let jsonl = std::fs::read_to_string(dir.path().join("cen/trace.jsonl")).unwrap();
    assert!(!jsonl.contains("\"consensus_residual\":[0"));
    let csv = std::fs::read_to_string(dir.path().join("cen/summary.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let residual_field = line.split(',').nth(3).unwrap();
        assert_eq!(residual_field, "");
    }
}

#[test]
fn replay_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", tiny_config());
    let run_out = dir.path().join("run");
    assert!(Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run_out)
        .status()
        .unwrap()
        .success());
    let trace_path = run_out.join("trace.jsonl");

    // Fresh trace replays byte-identically.
    let ok = Command::new(bin())
        .args(["replay", "--trace"])
        .arg(&trace_path)
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("replay ok"));

    // Edit one loss value: divergence at that record.
    let text = std::fs::read_to_string(&trace_path).unwrap();
    let target = text
        .lines()
        .enumerate()
        .find(|(_, l)| l.contains("\"loss\":"))
        .map(|(i, _)| i)
        .unwrap();
    let tampered: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == target {
                l.replacen("\"loss\":", "\"loss\":9", 1)
            } else {
                l.to_string()
            }
        })
        .collect();
    let tampered_path = dir.path().join("tampered.jsonl");
    std::fs::write(&tampered_path, tampered.join("\n") + "\n").unwrap();
    let bad = Command::new(bin())
        .args(["replay", "--trace"])
        .arg(&tampered_path)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(
        err.contains(&format!("record {}", target + 1)),
        "stderr: {err}"
    );

    // A different seed diverges at the first record (the header).
    let reseeded: Vec<String> = text
        .lines()
        .map(|l| l.replace("\"seed\":11", "\"seed\":12"))
        .collect();
    let reseeded_path = dir.path().join("reseeded.jsonl");
    std::fs::write(&reseeded_path, reseeded.join("\n") + "\n").unwrap();
    let bad2 = Command::new(bin())
        .args(["replay", "--trace"])
        .arg(&reseeded_path)
        .output()
        .unwrap();
    assert_eq!(bad2.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad2.stderr).contains("record 1"));
}

#[test]
fn oracle_report_is_deterministic_and_correct() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", tiny_config());
    let run_once = || {
        let out = Command::new(bin())
            .args(["oracle", "--config"])
            .arg(&cfg)
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let a = run_once();
    assert_eq!(a, run_once());
    let report: serde_json::Value = serde_json::from_str(a.trim()).unwrap();
    // Separable oracle: per-slot argmin.
    assert_eq!(report["optimum_tokens"], serde_json::json!([1]));
    assert_eq!(report["optimum_demos"], serde_json::json!([1]));
    let loss = report["optimum_loss"].as_f64().unwrap();
    assert!((loss - 0.3).abs() < 1e-12);

    // Random tables report identically across runs for a fixed table seed.
    let rnd = write_config(
        dir.path(),
        "rnd.json",
        r#"{
            "shape": {"tokens": 2, "vocab": 3, "demo_slots": 1, "demos_per_slot": 2},
            "evaluator": {"kind": "random-table", "table_seed": 7, "lo": 0.0, "hi": 1.0}
        }"#,
    );
    let once = Command::new(bin())
        .args(["oracle", "--config"])
        .arg(&rnd)
        .output()
        .unwrap();
    let twice = Command::new(bin())
        .args(["oracle", "--config"])
        .arg(&rnd)
        .output()
        .unwrap();
    assert!(once.status.success());
    assert_eq!(once.stdout, twice.stdout);
}

#[test]
fn config_errors_use_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", "{ not json");
    let out = Command::new(bin())
        .args(["run", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let missing = Command::new(bin())
        .args(["run", "--config", "/nonexistent/cfg.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

fn remote_spec(endpoint: String) -> EvaluatorSpec {
    EvaluatorSpec::Remote {
        endpoint,
        template: None,
        vocab: vec![],
        corpus_path: None,
        timeout_ms: 2_000,
    }
}

fn small_shape() -> ProblemShape {
    ProblemShape {
        tokens: 2,
        vocab: 4,
        demo_slots: 1,
        demos_per_slot: 3,
    }
}

#[test]
fn remote_tcp_echo_round_trip() {
    // In-test stub peer: replies 0.42 to everything.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        for line in reader.lines() {
            let line = line.unwrap();
            let v: serde_json::Value = serde_json::from_str(&line).unwrap();
            writeln!(writer, "{{\"id\":{},\"loss\":0.42}}", v["id"]).unwrap();
        }
    });

    let spec = remote_spec(format!("tcp:{addr}"));
    let mut eval = RemoteEvaluator::connect(&spec, &small_shape()).unwrap();
    let a = DiscreteAssignment {
        tokens: vec![1, 2],
        demos: vec![0],
    };
    for _ in 0..5 {
        assert_eq!(eval.evaluate(&a).unwrap(), 0.42);
    }
    drop(eval);
    server.join().unwrap();
}

#[test]
fn remote_handles_out_of_order_responses() {
    // For every request the peer first pre-sends the answer to the NEXT id
    // (ids are sequential), then the requested one: responses routinely
    // arrive before their requests and must be buffered and correlated.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        for line in reader.lines() {
            let Ok(line) = line else { break };
            let v: serde_json::Value = serde_json::from_str(&line).unwrap();
            let id = v["id"].as_u64().unwrap();
            let loss = |i: u64| 0.1 * (1 + i) as f64;
            // The client may hang up while we pre-send; that is fine.
            if writeln!(writer, "{{\"id\":{},\"loss\":{}}}", id + 1, loss(id + 1)).is_err()
                || writeln!(writer, "{{\"id\":{id},\"loss\":{}}}", loss(id)).is_err()
            {
                break;
            }
        }
    });

    let spec = remote_spec(format!("tcp:{addr}"));
    let mut eval = RemoteEvaluator::connect(&spec, &small_shape()).unwrap();
    let a = DiscreteAssignment {
        tokens: vec![0, 0],
        demos: vec![0],
    };
    for expect in [0.1, 0.2, 0.3, 0.4] {
        let got = eval.evaluate(&a).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
    drop(eval);
    server.join().unwrap();
}

#[test]
fn remote_timeout_is_retryable_and_malformed_is_not() {
    // Silent peer: accepts and never answers.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let silent = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        std::thread::sleep(std::time::Duration::from_millis(1200));
        drop(stream);
    });
    let spec = EvaluatorSpec::Remote {
        endpoint: format!("tcp:{addr}"),
        template: None,
        vocab: vec![],
        corpus_path: None,
        timeout_ms: 300,
    };
    let mut eval = RemoteEvaluator::connect(&spec, &small_shape()).unwrap();
    let a = DiscreteAssignment {
        tokens: vec![0, 0],
        demos: vec![0],
    };
    let err = eval.evaluate(&a).unwrap_err();
    assert!(err.is_retryable(), "timeout should be retryable: {err}");
    drop(eval);
    silent.join().unwrap();

    // Garbage peer: protocol violation, not retryable.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let garbage = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        for line in reader.lines() {
            let _ = line.unwrap();
            writeln!(writer, "not json at all").unwrap();
        }
    });
    let spec = remote_spec(format!("tcp:{addr}"));
    let mut eval = RemoteEvaluator::connect(&spec, &small_shape()).unwrap();
    let err = eval.evaluate(&a).unwrap_err();
    assert!(!err.is_retryable(), "protocol violation must not be retryable");
    drop(eval);
    garbage.join().unwrap();
}

#[test]
fn stdio_stub_runs_end_to_end_with_prompts() {
    // Full pipeline over a spawned stub peer: renders prompts, prices them
    // by prompt length, and runs a short optimization.
    let dir = tempfile::tempdir().unwrap();
    let corpus = serde_json::json!({
        "demos": [[
            {"fields": {"TEXT": "alpha"}, "answer": "Yes"},
            {"fields": {"TEXT": "beta"}, "answer": "No"}
        ]],
        "query": {"fields": {"TEXT": "gamma"}}
    });
    let corpus_path = dir.path().join("corpus.json");
    std::fs::write(&corpus_path, corpus.to_string()).unwrap();

    let spec = EvaluatorSpec::Remote {
        endpoint: format!("stdio:{} stub --loss-kind prompt-len", bin()),
        template: Some("Q: [TEXT]? Note: [VAR].".into()),
        vocab: vec!["aa".into(), "b".into()],
        corpus_path: Some(corpus_path.display().to_string()),
        timeout_ms: 5_000,
    };
    let shape = ProblemShape {
        tokens: 1,
        vocab: 2,
        demo_slots: 1,
        demos_per_slot: 2,
    };
    let mut eval = RemoteEvaluator::connect(&spec, &shape).unwrap();
    // Token 0 ("aa") renders one char longer than token 1 ("b"), so its
    // prompt-length loss is strictly larger.
    let loss_aa = eval
        .evaluate(&DiscreteAssignment {
            tokens: vec![0],
            demos: vec![0],
        })
        .unwrap();
    let loss_b = eval
        .evaluate(&DiscreteAssignment {
            tokens: vec![1],
            demos: vec![0],
        })
        .unwrap();
    assert!(loss_aa > loss_b);
    // Two [VAR] expansions per prompt (demo block + query block) make the
    // difference two characters at 1e-3 each.
    assert!((loss_aa - loss_b - 0.002).abs() < 1e-12);
}

#[test]
fn stub_tcp_shuffle_window_serves_out_of_order() {
    let mut child = Command::new(bin())
        .args([
            "stub",
            "--listen",
            "tcp:127.0.0.1:47311",
            "--loss-kind",
            "index-sum",
            "--shuffle-window",
            "3",
        ])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    // Wait for the listener to come up.
    let mut connected = None;
    for _ in 0..50 {
        match std::net::TcpStream::connect("127.0.0.1:47311") {
            Ok(s) => {
                connected = Some(s);
                break;
            }
            Err(_) => std::thread::sleep(std::time::Duration::from_millis(50)),
        }
    }
    let stream = connected.expect("stub listener did not come up");
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    for id in 0..3 {
        writeln!(
            writer,
            "{{\"id\":{id},\"tokens\":[{id}],\"demos\":[]}}"
        )
        .unwrap();
    }
    let mut ids = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        ids.push(v["id"].as_u64().unwrap());
        let loss = v["loss"].as_f64().unwrap();
        assert!((loss - 0.01 * v["id"].as_f64().unwrap()).abs() < 1e-12);
    }
    // Reversed batch: the stub answered out of order.
    assert_eq!(ids, vec![2, 1, 0]);
    child.kill().unwrap();
    let _ = child.wait();
}
