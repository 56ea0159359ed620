use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use conflicts_cli::pool::workers_from_env;
use conflicts_cli::{
    assess_file, parse_config, render_report, run_di_false_positive, run_matrix, sweep_hyperparams, Axis, Format,
    MatrixOptions, MatrixResult, RecordFile,
};

/// Train models under pairs of protection mechanisms and test whether the
/// pair conflicts.
///
/// Exit status: 0 when no conflict is detected, 2 when one is, 1 on error.
/// `CONFLICT_WORKERS` caps the number of concurrent training runs.
#[derive(Parser)]
#[command(name = "conflicts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the seeded matrix of a config and print its report.
    Run {
        config: PathBuf,
        /// Record file; defaults to the config's `output` or `<config>.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Save every trained model as JSON in this directory.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
    /// Run one matrix per value of a hyperparameter and print the curve table.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dataset inference with victim and independent models on disjoint chunks.
    DiFp {
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Also write the per-trial p-values as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Re-assess record files and render a report.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn status(results: &[MatrixResult]) -> ExitCode {
    for r in results {
        if !r.incomplete.is_empty() {
            eprintln!("{}: no verdict ({})", r.name, r.incomplete.join("; "));
        }
    }
    if results.iter().any(|r| r.conflict() == Some(true)) {
        ExitCode::from(2)
    } else if results.iter().any(|r| r.verdict.is_none()) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let workers = workers_from_env();
    match cli.command {
        Command::Run {
            config: path,
            output,
            artifacts,
            format,
        } => {
            let config = parse_config(&path)?;
            let output = output.unwrap_or_else(|| config.output_path(&path));
            let options = MatrixOptions {
                workers,
                artifacts_dir: artifacts,
                max_new_runs: None,
            };
            let result = run_matrix(&config, &base_dir(&path), &output, &options)?;
            eprintln!("{} new runs; records in {}", result.executed, output.display());
            let results = [result];
            print!("{}", render_report(&results, format)?);
            Ok(status(&results))
        }
        Command::Sweep {
            config: path,
            axis,
            values,
            output,
        } => {
            let config = parse_config(&path)?;
            let output = output.unwrap_or_else(|| config.output_path(&path));
            let options = MatrixOptions {
                workers,
                ..Default::default()
            };
            let sweep = sweep_hyperparams(&config, &base_dir(&path), &output, axis, &values, &options)?;
            print!("{}", sweep.curve_csv());
            Ok(status(&sweep.matrices))
        }
        Command::DiFp {
            config: path,
            trials,
            json,
        } => {
            let config = parse_config(&path)?;
            let result = run_di_false_positive(&config, &base_dir(&path), trials, workers)?;
            if let Some(json) = json {
                std::fs::write(&json, serde_json::to_string_pretty(&result)?)
                    .with_context(|| format!("writing {}", json.display()))?;
            }
            print!("{}", result.to_markdown());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { records, format } => {
            let mut results = Vec::new();
            for path in &records {
                results.extend(assess_file(&RecordFile::read(path)?)?);
            }
            print!("{}", render_report(&results, format)?);
            Ok(status(&results))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
