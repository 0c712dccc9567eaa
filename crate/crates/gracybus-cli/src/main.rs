//! Scenario CLI: runs scenario files against the simulated bus, reproduces
//! the evaluation tables, dumps known-answer wire vectors, and generates
//! scenario CA material.
//!
//! Exit codes for `run`: 0 success, 2 convergence failure, 3 parse error,
//! 4 livelock.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gracybus::crypto::CipherSuiteId;
use gracybus::harness::TestCa;
use gracybus::metrics::{
    COST_HEIGHTS, CanonicalRun, TABLE_SIZES, build_conformance_table, build_size_table,
    render_conformance_table, render_size_table, render_storage_table, storage_row,
};
use gracybus::scenario::{
    RunOptions, RunOutcome, Scenario, ScenarioError, emit_json_lines, emit_table,
    known_answer_vectors, run_scenario,
};
use gracybus::wire::encode_certificate;

#[derive(Parser)]
#[command(name = "gracybus", version, about = "group key agreement scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    JsonLines,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and emit the run report.
    Run {
        /// Path to the scenario file.
        scenario: PathBuf,
        /// Override the file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the file's cipher suite id.
        #[arg(long)]
        suite: Option<u16>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Delivery budget before a run is declared livelocked.
        #[arg(long, default_value_t = 10_000)]
        max_steps: usize,
    },
    /// Reproduce the message-size, storage, and cost-model tables.
    Tables {
        /// Emit JSON instead of text tables.
        #[arg(long)]
        json: bool,
    },
    /// Dump known-answer encodings under the toy suite.
    Vectors,
    /// Generate a scenario CA and device certificates as hex files.
    GenCa {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated device identities.
        #[arg(long, value_delimiter = ',')]
        devices: Vec<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            seed,
            suite,
            format,
            max_steps,
        } => cmd_run(&scenario, seed, suite, format, max_steps),
        Command::Tables { json } => cmd_tables(json),
        Command::Vectors => {
            print!("{}", known_answer_vectors());
            ExitCode::SUCCESS
        }
        Command::GenCa { out, devices, seed } => cmd_gen_ca(&out, &devices, seed),
    }
}

fn cmd_run(
    path: &PathBuf,
    seed: Option<u64>,
    suite: Option<u16>,
    format: Format,
    max_steps: usize,
) -> ExitCode {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(3);
        }
    };
    let scenario = match Scenario::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let options = RunOptions {
        seed_override: seed,
        suite_override: suite.map(CipherSuiteId),
        max_steps,
    };
    let report = match run_scenario(&scenario, &options) {
        Ok(r) => r,
        Err(e @ (ScenarioError::Parse { .. } | ScenarioError::UnknownDevice(_))) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    match format {
        Format::Table => print!("{}", emit_table(&report)),
        Format::JsonLines => print!("{}", emit_json_lines(&report)),
    }
    match report.outcome {
        RunOutcome::Converged => ExitCode::SUCCESS,
        RunOutcome::Diverged => ExitCode::from(2),
        RunOutcome::Livelock => ExitCode::from(4),
    }
}

fn cmd_tables(json: bool) -> ExitCode {
    let runs: Vec<CanonicalRun> = TABLE_SIZES
        .iter()
        .map(|&n| CanonicalRun::new(n).expect("canonical run"))
        .collect();
    let sizes = build_size_table(&runs);
    let storage: Vec<_> = runs.iter().map(storage_row).collect();
    let cost_runs: Vec<CanonicalRun> = COST_HEIGHTS
        .iter()
        .map(|&h| CanonicalRun::new(1 << h).expect("canonical run"))
        .collect();
    let conformance = build_conformance_table(&cost_runs);

    if json {
        let value = serde_json::json!({
            "sizes": sizes,
            "storage": storage,
            "conformance": conformance,
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    } else {
        print!("{}", render_size_table(&sizes));
        println!();
        print!("{}", render_storage_table(&storage));
        println!();
        print!("{}", render_conformance_table(&conformance));
    }
    ExitCode::SUCCESS
}

fn cmd_gen_ca(out: &PathBuf, devices: &[String], seed: u64) -> ExitCode {
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return ExitCode::from(3);
    }
    let ca = TestCa::new(seed);
    let anchor = ca.anchor();
    let write = |name: &str, data: String| -> std::io::Result<()> {
        fs::write(out.join(name), data + "\n")
    };
    let result = (|| -> std::io::Result<()> {
        write("ca.name", anchor.ca_name.clone())?;
        write("ca.pub", hex::encode(&anchor.ca_public))?;
        for (i, device) in devices.iter().enumerate() {
            let (cert, private) = ca.issue(device, seed ^ (i as u64 + 1));
            write(&format!("{device}.cert"), hex::encode(encode_certificate(&cert)))?;
            write(&format!("{device}.key"), hex::encode(private))?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        eprintln!("error: {e}");
        return ExitCode::from(3);
    }
    println!(
        "wrote CA and {} device certificate(s) to {}",
        devices.len(),
        out.display()
    );
    ExitCode::SUCCESS
}
