//! `pipeline` — single entry point wiring the stages:
//! preprocess -> landmarks -> train -> infer -> eval -> preview.
//!
//! Exit codes: 0 success, 1 validation/configuration failure, 2 runtime
//! failure.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facegan::PipelineError;

#[derive(Parser)]
#[command(name = "pipeline", version, about = "RGBD face synthesis pipeline")]
struct Cli {
    /// Run every kernel single-threaded. Results are bit-identical either
    /// way; this additionally serializes scheduling.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register, depth-window and sharpen raw frames.
    Preprocess {
        /// Dataset root containing raw/.
        #[arg(long = "in")]
        input: PathBuf,
        /// Dataset root receiving processed/ and meta/ (usually same as --in).
        #[arg(long)]
        out: PathBuf,
        /// Near plane of the 255 mm depth window, millimeters.
        #[arg(long = "near-mm")]
        near_mm: Option<u16>,
    },
    /// Detect 70 landmarks, crop to squares and render FLMs.
    Landmarks {
        #[arg(long = "in")]
        input: PathBuf,
        /// Landmark source: "synthetic" replays `raw/<id>_lms.txt` files.
        #[arg(long, default_value = "synthetic")]
        backend: String,
        /// Keep the literal non-square landmark bounding box.
        #[arg(long = "no-square")]
        no_square: bool,
        /// Output crop resolution.
        #[arg(long, default_value_t = 512)]
        size: u32,
    },
    /// Train the conditional GAN.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate RGBD frames (and optionally point clouds) from FLMs.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// A single FLM image or a directory of `<id>_flm.png` files.
        #[arg(long)]
        flm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export a binary PLY point cloud per frame.
        #[arg(long)]
        ply: bool,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report the JPEG-quality-equivalence score (slow).
        #[arg(long = "jpeg-equiv")]
        jpeg_equiv: bool,
        /// Cap on rendered side-by-side figures.
        #[arg(long, default_value_t = 8)]
        max_figures: usize,
    },
    /// Orthographic turntable preview of a PLY file.
    Preview {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        angle: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: u32,
    },
    /// Preprocess, landmarks, train and eval in one versioned run directory.
    RunAll {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        backend: String,
    },
    /// Validate dataset layout, pairing and resolutions.
    Preflight {
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.deterministic {
        facegan_nn::parallel::set_sequential(true);
    }
    if let Err(err) = check_device() {
        eprintln!("error: {err}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Preprocess { input, out, near_mm } => stages::preprocess(&input, &out, near_mm),
        Command::Landmarks { input, backend, no_square, size } => {
            stages::landmarks(&input, &backend, !no_square, size)
        }
        Command::Train { data, config, out, resume } => {
            stages::train(&data, config.as_deref(), &out, resume.as_deref())
        }
        Command::Infer { ckpt, flm, out, ply } => stages::infer(&ckpt, &flm, &out, ply),
        Command::Eval { ckpt, data, out, jpeg_equiv, max_figures } => {
            stages::eval(&ckpt, &data, &out, jpeg_equiv, max_figures)
        }
        Command::Preview { ply, angle, out, size } => stages::preview(&ply, angle, &out, size),
        Command::RunAll { data, config, out, backend } => {
            stages::run_all(&data, config.as_deref(), &out, &backend)
        }
        Command::Preflight { data } => stages::preflight(&data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

/// Accelerator selection. Only the CPU backend is built in; the variable
/// exists so callers fail loudly instead of silently running on the wrong
/// device.
fn check_device() -> Result<(), PipelineError> {
    match std::env::var("FACEGAN_DEVICE") {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok(()),
        Ok(v) => Err(PipelineError::Config(format!(
            "FACEGAN_DEVICE={v} is not available; this build supports: cpu"
        ))),
    }
}
