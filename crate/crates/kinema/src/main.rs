//! `kinema`: train the 3D autoencoder and the masked-conditioning diffusion
//! model, generate long videos, and evaluate them against reference data.
//!
//! Every command takes one TOML config; `--seed` and `--out-dir` override the
//! corresponding `[run]` fields. Exit codes: 0 success, 2 configuration or
//! shape error, 3 numerical fault, 4 I/O or ingestion error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kinema::conditioning::Role;
use kinema::config::RunConfig;
use kinema::error::Result;
use kinema::pipeline;

#[derive(Parser)]
#[command(name = "kinema", about = "latent video diffusion on a desk-scale budget")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "kinema.toml")]
    config: PathBuf,

    /// Override [run].seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override [run].out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the 3D autoencoder.
    TrainAe {
        /// Continue from an autoencoder checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a diffusion model for one conditioning role.
    TrainDm {
        /// unconditional | prediction | interpolation
        #[arg(long)]
        role: String,
        /// Autoencoder checkpoint directory (latent statistics required).
        #[arg(long)]
        ae: PathBuf,
        /// Warm-start weights from another diffusion checkpoint
        /// (shape-matching parameters are adopted, the rest stay fresh).
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Continue from a checkpoint of the same role and config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one unconditional window.
    Sample {
        #[arg(long)]
        ae: PathBuf,
        /// Unconditional diffusion checkpoint.
        #[arg(long)]
        dm: PathBuf,
        /// Pixel frames to emit (= latent window x temporal factor).
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a long video by autoregressive window extension.
    Extend {
        #[arg(long)]
        ae: PathBuf,
        /// Prediction-role diffusion checkpoint.
        #[arg(long)]
        dm: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a long video coarse-to-fine: sparse anchors, then
    /// interpolation of the gaps.
    Hierarchical {
        #[arg(long)]
        ae: PathBuf,
        /// Prediction-role checkpoint driving the sparse anchor pass.
        #[arg(long)]
        dm_sparse: PathBuf,
        /// Interpolation-role checkpoint filling the gaps.
        #[arg(long)]
        dm_interp: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated clips against the dataset: metric-vs-length table,
    /// JSON records, and a curve plot.
    Eval {
        #[arg(long)]
        ae: PathBuf,
        /// Directory of generated .raw clips.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's manifest summary.
    InspectCheckpoint { dir: PathBuf },
}

fn parse_role(s: &str) -> Result<Role> {
    match s {
        "unconditional" => Ok(Role::Unconditional),
        "prediction" => Ok(Role::Prediction),
        "interpolation" => Ok(Role::Interpolation),
        other => Err(kinema::error::Error::config(format!(
            "unknown role `{other}`; expected unconditional, prediction, or interpolation"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out_dir) = cli.out_dir {
        cfg.run.out_dir = out_dir;
    }

    match cli.command {
        Command::TrainAe { resume } => {
            let outcome = pipeline::train_autoencoder(&cfg, resume.as_deref())?;
            println!("autoencoder checkpoint: {}", outcome.checkpoint.display());
        }
        Command::TrainDm { role, ae, init_from, resume } => {
            let role = parse_role(&role)?;
            let outcome = pipeline::train_diffusion(
                &cfg,
                role,
                &ae,
                init_from.as_deref(),
                resume.as_deref(),
            )?;
            println!("diffusion checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Sample { ae, dm, frames, out } => {
            pipeline::sample_command(&cfg, &ae, &dm, frames, &out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Extend { ae, dm, frames, out } => {
            pipeline::extend_command(&cfg, &ae, &dm, frames, &out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Hierarchical { ae, dm_sparse, dm_interp, frames, out } => {
            pipeline::hierarchical_command(&cfg, &ae, &dm_sparse, &dm_interp, frames, &out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Eval { ae, generated, out } => {
            pipeline::eval_command(&cfg, &ae, &generated, &out)?;
            println!("wrote evaluation to {}", out.display());
        }
        Command::InspectCheckpoint { dir } => {
            print!("{}", pipeline::describe_checkpoint(&dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
