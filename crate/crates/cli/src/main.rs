use clap::{Args, Parser, Subcommand};
use phaseseg::{cmd_eval, cmd_export, cmd_fit, cmd_segment, cmd_synth, cmd_train, CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "phaseseg", version, about = "Unsupervised motion-phase segmentation of 2D pose sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset.
    Synth(Common),
    /// Train the denoising encoder.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved encoder checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Initialize prototypes and train the projector.
    Fit(Common),
    /// Segment videos into phases.
    Segment {
        #[command(flatten)]
        common: Common,
        /// Comma-separated video ids (default: all).
        #[arg(long, value_delimiter = ',')]
        videos: Vec<String>,
    },
    /// Score segmentations against ground truth.
    Eval(Common),
    /// Write a ground-truth vs prediction timeline for one video.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        video: String,
    },
}

fn config(c: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(c.config.as_deref(), c.seed, c.out.as_deref())
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(c) => {
            let s = cmd_synth(&config(&c)?)?;
            println!("wrote {} videos, {} frames, k={} to {}", s.videos, s.frames, s.k, s.manifest.display());
        }
        Command::Train { common, resume } => {
            let logs = cmd_train(&config(&common)?, resume)?;
            if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
                println!("trained to epoch {}: loss {:.6} (epoch {}: {:.6})", last.epoch, last.total, first.epoch, first.total);
            }
        }
        Command::Fit(c) => {
            let logs = cmd_fit(&config(&c)?)?;
            if let Some(last) = logs.last() {
                println!("fit {} epochs: OT objective {:.6}, loss {:.6}", last.epoch, last.ot_objective, last.loss);
            }
        }
        Command::Segment { common, videos } => {
            let cfg = config(&common)?;
            let ids = cmd_segment(&cfg, (!videos.is_empty()).then_some(videos.as_slice()))?;
            println!("segmented {} videos", ids.len());
        }
        Command::Eval(c) => {
            let r = cmd_eval(&config(&c)?)?;
            let m = &r.metrics;
            println!("videos {}: MoF {:.4}  F1 {:.4}  mIoU {:.4}  mAP {:.4}", m.videos, m.mof, m.f1, m.miou, m.map);
        }
        Command::Export { common, video } => {
            let path = cmd_export(&config(&common)?, &video)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
