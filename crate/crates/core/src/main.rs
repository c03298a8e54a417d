use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sharepact::ledger::read_jsonl_verified;
use sharepact::scenario::latency::DeployKind;
use sharepact::scenario::sweep::{gas_sweep, write_csv};
use sharepact::scenario::{self, Scenario};

const EXIT_FAILED: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "sharepact", version, about = "Run data-sharing contract scenarios and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file.
    Run {
        scenario: PathBuf,
        /// Override the seed stored in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON run report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Export the event log as JSON Lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Deployment gas and modeled latency across panel sizes.
    GasSweep {
        #[arg(long)]
        kind: DeployKind,
        /// Inclusive voter range, e.g. 1..10.
        #[arg(long, value_parser = parse_range)]
        voters: (usize, usize),
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the hash chain of an exported event log.
    VerifyLog { file: PathBuf },
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a = a.trim().parse().map_err(|e| format!("bad start {a:?}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("bad end {b:?}: {e}"))?;
    Ok((a, b))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, seed, report, log } => run(scenario, seed, report, log),
        Command::GasSweep { kind, voters, reps, csv, seed } => sweep(kind, voters, reps, csv, seed),
        Command::VerifyLog { file } => verify(file),
    }
}

fn run(path: PathBuf, seed: Option<u64>, report: Option<PathBuf>, log: Option<PathBuf>) -> ExitCode {
    let sc = match Scenario::load(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let outcome = match scenario::run(&sc, seed) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let r = &outcome.report;
    if let Some(p) = report {
        if let Err(e) = fs::write(&p, r.to_json()) {
            eprintln!("error: {}: {e}", p.display());
            return ExitCode::from(EXIT_INPUT);
        }
    }
    if let Some(p) = log {
        if let Err(e) = outcome.ledger.export_jsonl(&p) {
            eprintln!("error: {}: {e}", p.display());
            return ExitCode::from(EXIT_INPUT);
        }
    }
    let passed = r.assertions.iter().filter(|a| a.passed).count();
    println!(
        "{}: {} steps, {}/{} assertions, {} events, head {}",
        r.name,
        r.steps.len(),
        passed,
        r.assertions.len(),
        r.event_count,
        r.head_hash
    );
    for (name, a) in &r.accounts {
        println!("  {name:<12} {:>14} -> {:>14}  ({:+})", a.initial, a.final_balance, a.delta);
    }
    match &r.failure {
        None => ExitCode::SUCCESS,
        Some(f) => {
            eprintln!("FAILED: {f}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}

fn sweep(kind: DeployKind, voters: (usize, usize), reps: usize, csv: Option<PathBuf>, seed: u64) -> ExitCode {
    let rows = match gas_sweep(kind, voters.0..=voters.1, reps, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    println!("voters        gas     mean_s    var_s2  stddev_s   err_low  err_high");
    for r in &rows {
        let s = r.stats;
        println!(
            "{:>6} {:>10} {:>10.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            r.voters, r.gas, s.mean, s.variance, s.stddev, s.err_low, s.err_high
        );
    }
    if let Some(p) = csv {
        let written = fs::File::create(&p).and_then(|f| write_csv(&rows, std::io::BufWriter::new(f)));
        if let Err(e) = written {
            eprintln!("error: {}: {e}", p.display());
            return ExitCode::from(EXIT_INPUT);
        }
    }
    ExitCode::SUCCESS
}

fn verify(file: PathBuf) -> ExitCode {
    let bytes = match fs::read(&file) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return ExitCode::from(EXIT_INPUT);
        }
    };
    match read_jsonl_verified(&bytes) {
        Ok(records) => {
            let head = records.last().map(|r| r.this_hash.to_string()).unwrap_or_default();
            println!("ok: {} records, head {head}", records.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("invalid: record {}: {}", e.index, e.reason);
            ExitCode::from(EXIT_FAILED)
        }
    }
}
