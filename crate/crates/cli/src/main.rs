//! `pcaagg` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pcaagg_cli::compare::{compare, worker_threads};
use pcaagg_cli::figures::emit_figure_data;
use pcaagg_cli::runner::{dry_run, execute};
use pcaagg_cli::spec::ExperimentSpec;

#[derive(Parser)]
#[command(name = "pcaagg", version, about = "Serial and parallel cost aggregation experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one seeded run.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Defaults to the spec's model seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<output_dir or runs>/seed-<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved config and parameter counts, then exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run every sweep variant on the same seeds and summarize.
    Compare {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Defaults to the spec's `output_dir`, else `runs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write coupling and expert-redundancy CSVs for finished runs.
    EmitFigureData {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

/// Invalid input, as opposed to a failed run.
#[derive(Debug)]
struct Usage(anyhow::Error);

fn load(path: &Path) -> Result<ExperimentSpec, Usage> {
    ExperimentSpec::load(path).map_err(Usage)
}

fn default_out(spec: &ExperimentSpec) -> PathBuf {
    spec.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn dispatch(cmd: Command) -> Result<Result<(), Usage>> {
    match cmd {
        Command::Run { spec, seed, out, dry_run: dry } => {
            let spec = match load(&spec) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e)),
            };
            if !spec.sweep.is_empty() {
                return Ok(Err(Usage(anyhow::anyhow!("`run` takes a spec without `sweep`; use `compare`"))));
            }
            let seed = seed.unwrap_or(spec.model.seed);
            if dry {
                print!("{}", dry_run(&spec, seed)?);
                return Ok(Ok(()));
            }
            let out = out.unwrap_or_else(|| default_out(&spec).join(format!("seed-{seed}")));
            let outcome = execute(&spec, seed, &out)?;
            println!("{}: mIoU {:.4}", outcome.dir.display(), outcome.metrics.miou);
        }
        Command::Compare { spec, seeds, out } => {
            let spec = match load(&spec) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e)),
            };
            let threads = match worker_threads() {
                Ok(t) => t,
                Err(e) => return Ok(Err(Usage(e))),
            };
            let out = out.unwrap_or_else(|| default_out(&spec));
            let summary = compare(&spec, seeds, &out, threads)?;
            for v in &summary.variants {
                match v.miou {
                    Some(s) => println!("{:<32} mIoU {:.4} ± {:.4} ({} runs)", v.name, s.mean, s.std.unwrap_or(f64::NAN), s.count),
                    None => println!("{:<32} no completed runs", v.name),
                }
            }
            println!("summary: {}", out.join("summary.csv").display());
            let failed = summary.failures();
            if !failed.is_empty() {
                anyhow::bail!("{} of {} runs failed", failed.len(), summary.variants.iter().map(|v| v.runs.len()).sum::<usize>());
            }
            if !summary.paired {
                anyhow::bail!("variants were not evaluated on identical tasks");
            }
        }
        Command::EmitFigureData { dirs } => {
            for r in emit_figure_data(&dirs).context("emitting figure data")? {
                for w in &r.written {
                    println!("{}", w.display());
                }
            }
        }
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Usage(e))) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
