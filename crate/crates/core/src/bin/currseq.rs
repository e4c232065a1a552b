use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use currseq::commands::{
    cmd_decode, cmd_gradcheck, cmd_prepare, cmd_report, cmd_run, CommandError, GradcheckConfig, RunArgs,
};
use currseq::vocab::DEFAULT_MAX_SIZE;

/// Sentence-length curriculum experiments for a small LSTM dialogue model.
#[derive(Debug, Parser)]
#[command(name = "currseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a dialogue corpus into length pools and build the vocabulary.
    Prepare {
        #[arg(long, env = "CURRSEQ_CORPUS")]
        corpus: PathBuf,
        #[arg(long, env = "CURRSEQ_OUT")]
        out: PathBuf,
        /// Recorded in the manifest; preparation itself draws no randomness.
        #[arg(long, env = "CURRSEQ_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "CURRSEQ_VOCAB_SIZE", default_value_t = DEFAULT_MAX_SIZE)]
        vocab_size: usize,
    },
    /// Execute a curriculum plan and write the report.
    Run {
        #[arg(long, env = "CURRSEQ_PLAN")]
        plan: PathBuf,
        #[arg(long, env = "CURRSEQ_OUT")]
        out: PathBuf,
        /// Overrides the plan's master seed.
        #[arg(long, env = "CURRSEQ_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "CURRSEQ_WORKERS", default_value_t = 1)]
        workers: usize,
        /// Continue an output directory that already holds runs.
        #[arg(long, env = "CURRSEQ_RESUME")]
        resume: bool,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, env = "CURRSEQ_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        vocab_size: usize,
        #[arg(long, default_value_t = 8)]
        embed_dim: usize,
        #[arg(long, default_value_t = 12)]
        hidden_dim: usize,
        /// Fault injection: `array:index:delta` added to one analytic coordinate.
        #[arg(long, hide = true, value_parser = parse_corrupt)]
        corrupt: Option<(usize, usize, f64)>,
    },
    /// Regenerate the report tables from a stored lineage tree.
    Report {
        #[arg(long, env = "CURRSEQ_OUT")]
        out: PathBuf,
    },
    /// Greedy replies of a checkpoint to lines read from standard input.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
}

fn parse_corrupt(s: &str) -> Result<(usize, usize, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, i, d] = parts.as_slice() else {
        return Err("expected array:index:delta".into());
    };
    Ok((
        a.parse().map_err(|e| format!("array: {e}"))?,
        i.parse().map_err(|e| format!("index: {e}"))?,
        d.parse().map_err(|e| format!("delta: {e}"))?,
    ))
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={} level={} {}",
                buf.timestamp_millis(),
                record.level().as_str().to_lowercase(),
                record.args()
            )
        })
        .init();
}

fn execute(cmd: Command, argv: Vec<String>) -> Result<(), CommandError> {
    match cmd {
        Command::Prepare {
            corpus, out, vocab_size, ..
        } => {
            let s = cmd_prepare(&corpus, &out, vocab_size, argv)?;
            println!(
                "short={} medium={} long={} cross={} discarded={} vocab={}",
                s.pool_sizes[0], s.pool_sizes[1], s.pool_sizes[2], s.pool_sizes[3], s.dispositions.discarded, s.vocab_size
            );
        }
        Command::Run {
            plan,
            out,
            seed,
            workers,
            resume,
            stop_after,
        } => {
            let args = RunArgs {
                plan,
                out,
                seed,
                workers,
                resume,
                stop_after,
            };
            let report = cmd_run(&args, argv)?;
            print!("{}", report.comparison_csv());
        }
        Command::Gradcheck {
            seed,
            vocab_size,
            embed_dim,
            hidden_dim,
            corrupt,
        } => {
            let cfg = GradcheckConfig {
                seed,
                vocab_size,
                embed_dim,
                hidden_dim,
                corrupt,
                ..GradcheckConfig::default()
            };
            let o = cmd_gradcheck(&cfg)?;
            println!("PASS coordinates={} max_rel_error={:.3e}", o.coordinates, o.max_rel_error);
        }
        Command::Report { out } => {
            let report = cmd_report(&out, argv)?;
            print!("{}", report.table2_csv());
        }
        Command::Decode {
            checkpoint,
            vocab,
            max_len,
        } => {
            let lines: Vec<String> = io::stdin()
                .lock()
                .lines()
                .collect::<Result<_, _>>()
                .map_err(|source| CommandError::Io {
                    context: "reading standard input".into(),
                    source,
                })?;
            for reply in cmd_decode(&checkpoint, &vocab, &lines, max_len)? {
                println!("{reply}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    match execute(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("event=failed error=\"{e}\"");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
