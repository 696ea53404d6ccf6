//! `occfield` command-line tool.
//!
//! Exit status: 0 on success, 1 for invalid input (bad flags, configs or
//! files), 2 when a computation fails.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Error caused by how the tool was invoked.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Parser)]
#[command(name = "occfield", version, about = "Fit and evaluate occupancy fields over contracted coordinates")]
pub struct Cli {
    /// Seed override for commands that draw random numbers (fit, gradcheck).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration for the command (fit: fit config, gradcheck:
    /// check config).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; receives the artifacts and `manifest.json`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene description to a frame directory.
    Synth(SynthArgs),
    /// Fit a grid to a frame directory.
    Fit(FitArgs),
    /// Render depth, opacity and labels from a checkpoint.
    Render(RenderArgs),
    /// Compare a predicted depth map with ground truth.
    EvalDepth(EvalDepthArgs),
    /// Compare thresholded occupancy with oracle voxels.
    EvalOcc(EvalOccArgs),
    /// Fuse detection masks into per-pixel category labels.
    FuseLabels(FuseLabelsArgs),
    /// Compare analytic gradients with central differences on a fixture.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene description (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Prompt table whose colors are used for label PNGs.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Frame directory written by `synth` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    /// Grid geometry (JSON).
    #[arg(long)]
    pub grid: PathBuf,
    /// Overrides the configured number of steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Also write a checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame directory providing the camera and ego poses.
    #[arg(long)]
    pub data: PathBuf,
    /// Camera name from the rig.
    #[arg(long)]
    pub camera: String,
    /// Frame index; defaults to the fit's keyframe.
    #[arg(long)]
    pub frame: Option<usize>,
    /// Prompt table whose colors are used for the label PNG.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalDepthArgs {
    /// Predicted depth (.pfm, or 16-bit millimeter .png).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth depth (.pfm, or 16-bit millimeter .png).
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalOccArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene description to voxelize as the oracle.
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub scene: Option<PathBuf>,
    /// Trajectory index whose ego frame the grid lives in; defaults to the
    /// fit's keyframe.
    #[arg(long, requires = "scene")]
    pub frame: Option<usize>,
    /// Oracle voxel labels (JSON).
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Occupancy threshold on activated opacity; repeat for a sweep.
    #[arg(long = "threshold", default_value = "0.5")]
    pub thresholds: Vec<f64>,
    /// Class ids to evaluate; defaults to those present in the oracle.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u8>>,
}

#[derive(Debug, Args)]
pub struct FuseLabelsArgs {
    /// Mask manifests (JSON), one per image.
    #[arg(long, required = true, num_args = 1..)]
    pub masks: Vec<PathBuf>,
    /// Prompt table (JSON); defaults to the builtin table.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Directory with `scene.json`, `fit.json`, `gradcheck.json` and either
    /// `perturbed.grid` or `grid.json`.
    #[arg(long)]
    pub fixture: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<occfield::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.is::<Usage>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
