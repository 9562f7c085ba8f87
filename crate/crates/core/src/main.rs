use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dettransnet::cli::commands::{
    cmd_detect, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, DetectFlags, EvalFlags,
    TrainFlags,
};
use dettransnet::cli::CliError;

/// Vision-transformer object detector with overlapping patches.
#[derive(Parser)]
#[command(name = "dettransnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the two-phase schedule and write checkpoints plus a loss CSV.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the phase-1 iteration count.
        #[arg(long)]
        iters_phase1: Option<usize>,
        /// Override the phase-2 iteration count.
        #[arg(long)]
        iters_phase2: Option<usize>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue bit-identically from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and emit the metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// COCO-format annotation file (defaults to the run's dataset).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Image directory for --annotations.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Write the metrics JSON here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a precision-recall SVG plot here.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Write per-image annotated PNGs into this directory.
        #[arg(long)]
        dump_images: Option<PathBuf>,
        /// Minimum score for a detection to enter the evaluation.
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
    },
    /// Detect objects in one image; boxes print in original coordinates.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Minimum score (defaults to the run's detect.score_threshold).
        #[arg(long)]
        score_threshold: Option<f64>,
        /// Write detections as JSON lines here as well as stdout.
        #[arg(long)]
        out_json: Option<PathBuf>,
        /// Write an annotated copy of the image here.
        #[arg(long)]
        out_image: Option<PathBuf>,
    },
    /// Generate a synthetic-shapes dataset (PNG images + COCO annotations).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        image_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the finite-difference gradient suite (double precision).
    Gradcheck {
        /// Random instances per primitive operation.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Random instances per end-to-end loss.
        #[arg(long, default_value_t = 20)]
        loss_instances: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            iters_phase1,
            iters_phase2,
            seed,
            out,
            resume,
        } => cmd_train(&TrainFlags {
            config,
            iters_phase1,
            iters_phase2,
            seed,
            out,
            resume,
        }),
        Command::Eval {
            checkpoint,
            annotations,
            images,
            out,
            plot,
            dump_images,
            score_threshold,
        } => cmd_eval(&EvalFlags {
            checkpoint,
            annotations,
            images,
            out,
            plot,
            dump_images,
            score_threshold,
        })
        .map(|_| ()),
        Command::Detect {
            checkpoint,
            image,
            score_threshold,
            out_json,
            out_image,
        } => cmd_detect(&DetectFlags {
            checkpoint,
            image,
            score_threshold,
            out_json,
            out_image,
        })
        .map(|_| ()),
        Command::GenData {
            out,
            count,
            image_size,
            seed,
        } => cmd_gen_data(&out, count, image_size, seed),
        Command::Gradcheck {
            instances,
            loss_instances,
        } => cmd_gradcheck(instances, loss_instances),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes; anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // numeric failures inside kernels surface as panics; report them as
    // runtime errors rather than a raw backtrace
    let outcome = std::panic::catch_unwind(|| run(cli));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .map(|s| s.as_str())
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("unexpected failure");
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
    }
}
