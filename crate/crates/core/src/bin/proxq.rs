use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use proxq::env::generate_dataset;
use proxq::harness::{
    emit_report, read_records, run_cells, write_outcomes, CellOutcome, ExperimentConfig,
    ReportFormat,
};
use proxq::verify::{run_suite, Suite};
use proxq::Error;

#[derive(Parser)]
#[command(
    name = "proxq",
    version,
    about = "Constraint-aware offline Q-learning on the Bid–Click benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a behavior dataset as JSON Lines.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured agent and seed on the full dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every configured agent and seed at each subsample fraction.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables and plot data from a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
    /// Run a built-in self-check suite.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

enum Failure {
    Validation(String),
    Abort(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Training { .. } => Failure::Abort(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Abort(msg)) => {
            eprintln!("training aborted: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { n, seed, out } => {
            let data = generate_dataset(n, seed)?;
            data.save(&out)?;
            println!("wrote {} transitions to {}", data.len(), out.display());
            Ok(())
        }
        Command::Train { config, out } => train(&config, out, false),
        Command::Sweep { config, out } => train(&config, out, true),
        Command::Report { input, format } => {
            let records = read_records(&input.join("records.jsonl"))?;
            let format = match format {
                Format::Markdown => ReportFormat::Markdown,
                Format::Csv => ReportFormat::Csv,
            };
            for p in emit_report(&records, format, &input)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Verify { suite, seed } => {
            let checks = run_suite(suite, seed);
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {:<22} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Failure::Validation(format!("{failed} check(s) failed")));
            }
            Ok(())
        }
    }
}

fn train(config: &Path, out: Option<PathBuf>, sweep: bool) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let out = out.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
        Failure::Validation("no output directory: pass --out or set output_dir".into())
    })?;
    let fractions = if sweep {
        cfg.subsample_fractions.clone()
    } else {
        vec![1.0]
    };
    let outcomes = run_cells(&cfg, &fractions)?;
    write_outcomes(&outcomes, &out)?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Validation(e.to_string()))?,
    )
    .map_err(|e| Failure::Validation(e.to_string()))?;
    summarize(&outcomes);
    let failed: Vec<&CellOutcome> = outcomes.iter().filter(|o| o.record.failed()).collect();
    if !failed.is_empty() {
        let first = &failed[0].record;
        return Err(Failure::Abort(format!(
            "{} of {} runs failed; first: {} seed {}: {}",
            failed.len(),
            outcomes.len(),
            first.agent,
            first.seed,
            first.error
        )));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn summarize(outcomes: &[CellOutcome]) {
    for o in outcomes {
        let r = &o.record;
        if r.failed() {
            println!(
                "{:<5} {:<20} f={:<7} seed={} FAILED: {}",
                r.agent, r.variant, r.fraction, r.seed, r.error
            );
        } else {
            println!(
                "{:<5} {:<20} f={:<7} seed={} return={:.4} regret={:.4} errors={} residual={:.4} ({:.1}s)",
                r.agent,
                r.variant,
                r.fraction,
                r.seed,
                r.return_norm,
                r.regret_norm,
                r.monotonicity_errors,
                r.residual_at_convergence,
                r.wallclock_seconds
            );
        }
    }
}
