use clap::{Args, Parser, Subcommand};
use cldpc_cli::commands::{self, Outcome};
use cldpc_cli::config::{Method, RunConfig};
use cldpc_cli::{exit_code_for, EXIT_BLOWUP, EXIT_OK};
use cldpc_core::scorenet::ModelKind;
use cldpc_core::{Error, Result};
use std::path::PathBuf;
use std::process::exit;

#[derive(Parser)]
#[command(name = "cldpc", version, about = "diffusion-planner control pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the training corpus and write it under the output root.
    GenData(RunArgs),
    /// Train the constant-level denoiser used for planning.
    TrainSync(RunArgs),
    /// Train the staircase-level denoiser used for per-step replanning.
    TrainAsync(RunArgs),
    /// Run controlled episodes with the configured method.
    Control(RunArgs),
    /// Run every method on the same episodes and write a summary table.
    Bench(RunArgs),
    /// Render stored episode traces or a metrics CSV to SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file; built-in defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed this command consumes.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; relative [paths] entries resolve against it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Controller to run (cl, cl-ddim, dpc-h, random); control only.
    #[arg(long)]
    method: Option<String>,
    /// Repeatable section.key=value override applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum SeedSlot {
    Data,
    Train,
    Control,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory the SVG files are written to.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Episode trace files or a metrics CSV.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn build_config(args: &RunArgs, slot: SeedSlot, allow_method: bool) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set '{pair}' must look like section.key=value")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(m) = &args.method {
        if !allow_method {
            return Err(Error::config("--method only applies to the control command"));
        }
        cfg.method = Method::parse(m)?;
    }
    if let Some(seed) = args.seed {
        match slot {
            SeedSlot::Data => cfg.data_seed = seed,
            SeedSlot::Train => cfg.train_seed = seed,
            SeedSlot::Control => cfg.control_seed = seed,
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.cmd {
        Cmd::GenData(a) => {
            let cfg = build_config(&a, SeedSlot::Data, false)?;
            commands::gen_data(&cfg, &a.out)
        }
        Cmd::TrainSync(a) => {
            let cfg = build_config(&a, SeedSlot::Train, false)?;
            commands::train_model(&cfg, &a.out, ModelKind::Sync)
        }
        Cmd::TrainAsync(a) => {
            let cfg = build_config(&a, SeedSlot::Train, false)?;
            commands::train_model(&cfg, &a.out, ModelKind::Async)
        }
        Cmd::Control(a) => {
            let cfg = build_config(&a, SeedSlot::Control, true)?;
            commands::control(&cfg, &a.out)
        }
        Cmd::Bench(a) => {
            let cfg = build_config(&a, SeedSlot::Control, false)?;
            commands::bench(&cfg, &a.out)
        }
        Cmd::Plot(a) => commands::plot_files(&a.out, &a.inputs),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => exit(if outcome.failed_episodes > 0 {
            EXIT_BLOWUP
        } else {
            EXIT_OK
        }),
        Err(e) => {
            eprintln!("error: {e}");
            exit(exit_code_for(&e));
        }
    }
}
