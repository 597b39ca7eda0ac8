use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use imfnd::encoders::BackendSpec;
use imfnd::prompting::PromptMode;
use imfnd_cli::commands::{cmd_cache_clear, cmd_cache_inspect, cmd_preprocess};
use imfnd_cli::config::{Overrides, RunConfig};
use imfnd_cli::run::{cmd_run, EXIT_HARD_ERROR};
use imfnd_cli::table::{load_reports, render, TableFormat};

/// Few-shot multimodal fake news detection experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick one image per multi-image record and write single-image JSONL.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Read the `[encoder]` section from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every (mode, shots) cell of the configured experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated modes (zero_shot, icl, imfnd, imfnd_no_proba).
        #[arg(long, value_delimiter = ',')]
        mode: Option<Vec<PromptMode>>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// mock-echo, mock-fixed:<label>, mock-scripted:<path> or remote:<model id>.
        #[arg(long)]
        client: Option<String>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a comparison table over saved reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: TableFormat,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Inspect or clear a response cache directory.
    Cache {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        clear: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Preprocess {
            input,
            output,
            image_root,
            config,
        } => {
            let encoder = match config {
                Some(path) => RunConfig::load(&path, &Overrides::default())?.encoder,
                None => BackendSpec::default(),
            };
            let n = cmd_preprocess(&input, image_root.as_deref(), &output, &encoder)?;
            println!("wrote {n} records to {}", output.display());
        }
        Command::Run {
            config,
            mode,
            shots,
            seeds,
            client,
            cache_dir,
            out,
        } => {
            let overrides = Overrides {
                modes: mode,
                shots,
                seeds,
                client,
                cache_dir,
                out,
            };
            let outcome = cmd_run(&config, &overrides)?;
            for cell in &outcome.manifest.cells {
                if !cell.failed_seeds.is_empty() {
                    eprintln!("{} {}-shot: seeds {:?} failed", cell.mode, cell.n_shots, cell.failed_seeds);
                }
            }
            println!("{}", outcome.manifest_path.display());
            return Ok(outcome.exit_code);
        }
        Command::Report { reports, format, output } => {
            let table = render(&load_reports(&reports)?, format);
            match output {
                Some(path) => std::fs::write(&path, table)?,
                None => print!("{table}"),
            }
        }
        Command::Cache { dir, clear } => {
            if clear {
                println!("removed {} entries", cmd_cache_clear(&dir)?);
            } else {
                for e in cmd_cache_inspect(&dir)? {
                    println!("{}\t{}\t{}\t{}", e.key, e.model_id, e.timestamp, e.response_bytes);
                }
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_HARD_ERROR as u8)
        }
    }
}
