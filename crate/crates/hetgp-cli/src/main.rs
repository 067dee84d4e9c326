//! Command-line benchmark harness for the heterogeneous multi-task GP
//! models.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use hetgp::datasets::{export_csv, gen_noisy_case, gen_park_case};
use hetgp_cli::config::{CaseName, ExperimentConfig, Seeds};
use hetgp_cli::records::{read_csv, RunRecord};
use hetgp_cli::runner::run_grid;
use hetgp_cli::summary::{summarize, write_summary_csv};

#[derive(Parser)]
#[command(name = "hetgp", about = "Multi-task GP benchmarks over heterogeneous input domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a (case x model x seed) experiment grid from a JSON config.
    Run {
        /// Path to the experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum concurrent runs.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the seed protocol with seeds 0..N.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Aggregate a records CSV into summary statistics.
    Summarize {
        /// Records CSV produced by `run`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output summary CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a benchmark dataset and export it as CSV files.
    GenData {
        /// Case name (`noisy` or `park`).
        #[arg(long)]
        case: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn cmd_run(
    config: PathBuf,
    out: Option<PathBuf>,
    workers: Option<usize>,
    seeds: Option<u64>,
) -> ExitCode {
    let text = match fs::read_to_string(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read config {}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg = match ExperimentConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = cfg.variants() {
        eprintln!("{e}");
        return ExitCode::from(2);
    }
    if let Some(n) = seeds {
        cfg.seeds = Seeds::Count(n);
    }
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    if let Err(e) = fs::create_dir_all(&out_dir) {
        eprintln!("cannot create output directory {}: {e}", out_dir.display());
        return ExitCode::from(1);
    }
    let records_path = out_dir.join("records.csv");
    let file = match fs::File::create(&records_path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("cannot create {}: {e}", records_path.display());
            return ExitCode::from(1);
        }
    };
    // records are appended as runs finish
    let writer = Mutex::new(csv::Writer::from_writer(file));
    let sink = |records: &[RunRecord]| {
        let mut w = writer.lock().unwrap();
        for r in records {
            if let Err(e) = w.serialize(r) {
                eprintln!("record write failure: {e}");
            }
        }
        let _ = w.flush();
        for r in records {
            match &r.error {
                Some(msg) => eprintln!(
                    "[fail] {} {} seed {}: {msg}",
                    r.case, r.model, r.seed
                ),
                None => println!(
                    "[done] {} {} seed {} task {}: smse {:.4} smll {:+.4} ({:.1}s)",
                    r.case,
                    r.model,
                    r.seed,
                    r.task,
                    r.smse.unwrap_or(f64::NAN),
                    r.smll.unwrap_or(f64::NAN),
                    r.wall_time_s.unwrap_or(0.0)
                ),
            }
        }
    };

    let records = match run_grid(&cfg, workers, Some(&sink)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    drop(writer);

    match summarize(&records) {
        Ok(rows) => {
            let path = out_dir.join("summary.csv");
            match fs::File::create(&path) {
                Ok(f) => {
                    if let Err(e) = write_summary_csv(&rows, f) {
                        eprintln!("summary write failure: {e}");
                    }
                }
                Err(e) => eprintln!("cannot create {}: {e}", path.display()),
            }
        }
        Err(e) => eprintln!("summary skipped: {e}"),
    }

    if records.iter().any(|r| r.is_error()) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_summarize(input: PathBuf, out: PathBuf) -> ExitCode {
    let file = match fs::File::open(&input) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("cannot read {}: {e}", input.display());
            return ExitCode::from(2);
        }
    };
    let records = match read_csv(file) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let rows = match summarize(&records) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match fs::File::create(&out) {
        Ok(f) => match write_summary_csv(&rows, f) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
        Err(e) => {
            eprintln!("cannot create {}: {e}", out.display());
            ExitCode::from(1)
        }
    }
}

fn cmd_gen_data(case: String, seed: u64, out: PathBuf) -> ExitCode {
    let case: CaseName = match case.parse() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let cfg = ExperimentConfig::new(case);
    let data = match case {
        CaseName::Noisy => gen_noisy_case(seed, cfg.n1(), cfg.sizes.n2, cfg.sizes.n_test),
        CaseName::Park => gen_park_case(seed, cfg.n1(), cfg.sizes.n2, cfg.sizes.n_test),
    };
    let data = match data {
        Ok(d) => d,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match export_csv(&data, &out) {
        Ok(()) => {
            println!("wrote {} task files to {}", data.tasks.len() * 2, out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            workers,
            seeds,
        } => cmd_run(config, out, workers, seeds),
        Command::Summarize { input, out } => cmd_summarize(input, out),
        Command::GenData { case, seed, out } => cmd_gen_data(case, seed, out),
    }
}
