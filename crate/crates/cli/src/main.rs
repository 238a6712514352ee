//! `msdet` — one binary for the whole desk-scale pipeline.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, configs, or input
//! files), 2 runtime error. Every run writes a manifest with the seed, a
//! hash of the effective config, and the crate version into `--out`.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "msdet", version, about = "Tiny pulmonary nodule detection, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tiny-nodule dataset with train/val manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Scene config file (structured text); defaults to the desk scene.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training samples to generate.
        #[arg(long, default_value_t = 240)]
        count: usize,
        /// Validation samples to generate.
        #[arg(long, default_value_t = 60)]
        val_count: usize,
        /// Override the scene's image size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Clip raw HU planes, normalize to 8-bit, optionally emit lung masks.
    Preprocess {
        /// A `.raw` file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write `<stem>_mask.pgm` lung masks.
        #[arg(long, default_value_t = false)]
        mask: bool,
        /// Air/tissue threshold for masking, 8-bit units.
        #[arg(long, default_value_t = 100)]
        mask_threshold: u8,
        #[arg(long, default_value_t = 1)]
        mask_erosions: usize,
        #[arg(long, default_value_t = 2)]
        mask_dilations: usize,
    },
    /// Static receptive-field and shape analysis of an architecture.
    Analyze {
        /// Built-in profile: desk or paper-640.
        #[arg(long, conflicts_with = "config")]
        profile: Option<String>,
        /// Model config file (.arch structured text).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report files here as well as printing them.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Declared target extent in pixels for collapse warnings.
        #[arg(long)]
        target_size: Option<f64>,
    },
    /// Run the registered finite-difference gradient checks.
    Gradcheck {
        /// Check every registered op.
        #[arg(long, conflicts_with = "op")]
        all: bool,
        /// Substring filter over check names.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a detector on a generated dataset.
    Train {
        /// Training manifest (image<TAB>label lines).
        #[arg(long)]
        data: PathBuf,
        /// Validation manifest for per-epoch metrics.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Train config file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model profile (desk or paper-640) or use --arch.
        #[arg(long, default_value = "desk", conflicts_with = "arch")]
        profile: String,
        /// Model config file.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint against a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "desk", conflicts_with = "arch")]
        profile: String,
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Decode confidence threshold.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// NMS IoU threshold.
        #[arg(long, default_value_t = 0.3)]
        iou_nms: f64,
    },
    /// Detect nodules in one image and write `class conf cx cy w h` lines.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (.pgm).
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "desk", conflicts_with = "arch")]
        profile: String,
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        threshold: f64,
        #[arg(long, default_value_t = 0.3)]
        iou_nms: f64,
    },
}

/// Validation failures exit 1, runtime failures exit 2.
fn classify(err: &anyhow::Error) -> u8 {
    use msdet_core::CoreError;
    match err.downcast_ref::<CoreError>() {
        Some(
            CoreError::InvalidArgument(_)
            | CoreError::InvalidShape(_)
            | CoreError::Parse { .. }
            | CoreError::ShapeMismatch { .. }
            | CoreError::EmptyOutput { .. },
        ) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, bad usage is validation
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::GenData { out, config, seed, count, val_count, size } => {
            commands::gen_data(&out, config.as_deref(), seed, count, val_count, size)
        }
        Command::Preprocess { input, out, mask, mask_threshold, mask_erosions, mask_dilations } => {
            commands::preprocess(&input, &out, mask, mask_threshold, mask_erosions, mask_dilations)
        }
        Command::Analyze { profile, config, out, target_size } => {
            commands::analyze(profile.as_deref(), config.as_deref(), out.as_deref(), target_size)
        }
        Command::Gradcheck { all, op, out } => commands::gradcheck(all, op.as_deref(), out.as_deref()),
        Command::Train { data, val, config, profile, arch, out, seed, epochs } => commands::train(
            &data,
            val.as_deref(),
            config.as_deref(),
            &profile,
            arch.as_deref(),
            &out,
            seed,
            epochs,
        ),
        Command::Eval { checkpoint, data, profile, arch, out, threshold, iou_nms } => {
            commands::eval(&checkpoint, &data, &profile, arch.as_deref(), &out, threshold, iou_nms)
        }
        Command::Infer { checkpoint, image, profile, arch, out, threshold, iou_nms } => {
            commands::infer(&checkpoint, &image, &profile, arch.as_deref(), &out, threshold, iou_nms)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}
