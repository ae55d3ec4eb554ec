use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layerforge_cli::commands;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "layerforge", version, about = "Layered-canvas conditioned generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural multi-rendering scene dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model; writes metrics.csv and checkpoints to --out.
    Train {
        /// JSON run config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an image for a canvas manifest; writes PNG plus JSON sidecar.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        canvas: PathBuf,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API. LAYERFORGE_ADDR overrides --addr;
    /// LAYERFORGE_MAX_PARALLEL bounds concurrent generations (default 2).
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        addr: Option<String>,
    },
    /// Finite-difference check of the training loss gradient.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Locking-fidelity and identity report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory from gen-data, or a count of training scenes.
        #[arg(long, default_value = "16")]
        scenes: String,
        #[arg(long)]
        report: PathBuf,
    },
}

fn print(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON value serializes"));
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData { seed, scenes, out } => print(&commands::gen_data(seed, scenes, &out)?),
        Command::Train { config, out } => print(&commands::train(config.as_deref(), &out)?),
        Command::Generate {
            checkpoint,
            canvas,
            steps,
            seed,
            out,
        } => print(&commands::generate(&checkpoint, &canvas, steps, seed, &out)?),
        Command::Serve { checkpoint, addr } => commands::serve(&checkpoint, addr.as_deref())?,
        Command::GradCheck { config } => {
            let (report, pass) = commands::grad_check(config.as_deref())?;
            print(&report);
            if !pass {
                eprintln!(
                    "error: max relative error {:e} exceeds {:e}",
                    report["max_rel_error"].as_f64().unwrap_or(f64::NAN),
                    commands::GRAD_CHECK_TOLERANCE
                );
                return Ok(false);
            }
        }
        Command::Eval {
            checkpoint,
            scenes,
            report,
        } => print(&commands::eval(&checkpoint, &scenes, &report)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": ").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
