use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use varifocal_cli::commands::{self, TraceArgs, Workspace};
use varifocal_cli::{Outcome, RunConfig};

/// Inverse design of a deformable varifocal mirror.
#[derive(Parser)]
#[command(name = "varifocal", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.hybrid.max_epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the mirror mesh and its augmented edges.
    GenMesh,
    /// Calibrate the deformation oracle.
    Calibrate,
    /// Simulate a dataset of random Bézier designs.
    GenData,
    /// Train the graph surrogate on a dataset.
    Train {
        /// Dataset directory (default: `<out>/dataset`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full design pipeline.
    #[command(alias = "run")]
    Optimize {
        /// Continue from `<out>/run/state.json`.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit after this many loop epochs.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Trace a Zernike surface file and write its spot diagram.
    Trace {
        #[arg(long)]
        surface: PathBuf,
        /// Detector plane z in mm (default: best focus).
        #[arg(long, allow_hyphen_values = true)]
        plane: Option<f64>,
        #[arg(long)]
        n_rays: Option<usize>,
        /// Source aperture radius, mm.
        #[arg(long)]
        aperture: Option<f64>,
        /// Output file stem.
        #[arg(long, default_value = "spot")]
        name: String,
    },
    /// Rebuild the reports of a finished run.
    Report,
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(out) = cli.common.out {
        cfg.output_dir = out;
    }
    let ws = Workspace::new(cfg)?;
    match cli.command {
        Command::GenMesh => commands::gen_mesh(&ws),
        Command::Calibrate => commands::calibrate(&ws),
        Command::GenData => commands::gen_data(&ws),
        Command::Train { data } => commands::train_surrogate(&ws, data.as_deref()),
        Command::Optimize { resume, stop_after_epoch } => commands::optimize(&ws, resume, stop_after_epoch),
        Command::Trace {
            surface,
            plane,
            n_rays,
            aperture,
            name,
        } => commands::trace(
            &ws,
            &TraceArgs {
                surface,
                plane,
                n_rays,
                aperture,
                name,
            },
        ),
        Command::Report => commands::report(&ws),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
