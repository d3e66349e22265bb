//! `hvc` binary: synthetic data generation, self-supervised training,
//! gradient checking, label propagation, and DAVIS-style evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hvc::cli;
use hvc::config::RunConfig;
use hvc::error::Error;

#[derive(Parser)]
#[command(name = "hvc", version, about = "Hybrid visual correspondence at desk scale")]
struct Args {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `run.seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training/evaluation corpus.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual encoder with the hybrid loss.
    Train {
        /// Directory of training images; synthesized in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoint, loss log, resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every backward pass.
    Gradcheck {
        /// Random trials per check.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Propagate a first-frame mask through one video.
    Propagate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of video frames.
        #[arg(long)]
        video: PathBuf,
        /// First-frame mask (pixel value = class id).
        #[arg(long)]
        first_mask: PathBuf,
        /// Output directory for predicted masks.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Prediction root (one subdirectory per video).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth root (one subdirectory per video).
        #[arg(long)]
        gt: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(args: &Args) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: Args) -> Result<i32, Error> {
    let cfg = load_config(&args)?;
    cli::init_threads(&cfg);
    match args.command {
        Command::GenData { out } => {
            let line = cli::cmd_gen_data(&cfg, &out)?;
            println!("{line}");
            Ok(0)
        }
        Command::Train { data, out } => {
            let outputs = cli::cmd_train(&cfg, data.as_deref(), &out)?;
            let final_loss = outputs.summary.final_loss().unwrap_or(f64::NAN);
            println!(
                "ok train steps={} final_loss={:.6} checkpoint={}",
                outputs.summary.steps,
                final_loss,
                outputs.checkpoint_path.display()
            );
            Ok(0)
        }
        Command::Gradcheck { trials } => {
            let (report, all_ok) = cli::cmd_gradcheck(cfg.run.seed, trials);
            print!("{report}");
            Ok(if all_ok { 0 } else { 2 })
        }
        Command::Propagate {
            checkpoint,
            video,
            first_mask,
            out,
        } => {
            let line = cli::cmd_propagate(&cfg, &checkpoint, &video, &first_mask, &out)?;
            println!("{line}");
            Ok(0)
        }
        Command::Eval { pred, gt, report } => {
            let result = cli::cmd_eval(&pred, &gt, cfg.eval.boundary_tol_frac, report.as_deref())?;
            for warning in &result.warnings {
                eprintln!("warning: {warning}");
            }
            print!("{}", result.to_table());
            println!("J&F_m {:.6}", result.jf_mean);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
