use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use asyndbt_harness::commands::{cmd_oracle, cmd_replay, cmd_run, cmd_stub, Overrides, StubLoss};

/// Asynchronous distributed bilevel tuner for discrete prompt programs.
#[derive(Parser)]
#[command(name = "asyndbt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a configured run and write trace files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for trace.jsonl and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the iteration budget.
        #[arg(long)]
        iters: Option<u64>,
        /// Remote evaluator endpoint: tcp:HOST:PORT or stdio:CMD.
        #[arg(long)]
        evaluator: Option<String>,
    },
    /// Enumerate the optimum and exact gradients for a desk-scale config.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        evaluator: Option<String>,
    },
    /// Re-execute a trace file and verify byte-identical reproduction.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Reference protocol peer (stdio by default, or a TCP listener).
    Stub {
        /// Listen address, e.g. tcp:127.0.0.1:9000; stdio when absent.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, value_enum, default_value_t = StubKind::Echo)]
        loss_kind: StubKind,
        /// Constant loss for the echo kind.
        #[arg(long, default_value_t = 0.42)]
        loss: f64,
        /// Respond in reversed batches of this size (exercises
        /// out-of-order delivery).
        #[arg(long, default_value_t = 1)]
        shuffle_window: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StubKind {
    Echo,
    IndexSum,
    PromptLen,
}

impl From<StubKind> for StubLoss {
    fn from(k: StubKind) -> Self {
        match k {
            StubKind::Echo => StubLoss::Echo,
            StubKind::IndexSum => StubLoss::IndexSum,
            StubKind::PromptLen => StubLoss::PromptLen,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            iters,
            evaluator,
        } => cmd_run(
            &config,
            &Overrides {
                seed,
                out_dir: out,
                max_iters: iters,
                evaluator_endpoint: evaluator,
            },
            &mut stdout,
        ),
        Command::Oracle { config, evaluator } => cmd_oracle(
            &config,
            &Overrides {
                evaluator_endpoint: evaluator,
                ..Overrides::default()
            },
            &mut stdout,
        ),
        Command::Replay { trace } => cmd_replay(&trace, &mut stdout),
        Command::Stub {
            listen,
            loss_kind,
            loss,
            shuffle_window,
        } => cmd_stub(listen.as_deref(), loss_kind.into(), loss, shuffle_window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
