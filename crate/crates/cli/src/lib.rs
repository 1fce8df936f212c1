//! Command-line front end for `morphstn`.
//!
//! Every command returns a [`CommandResult`]: exit code 0 on success, 1 for
//! bad input or configuration, 2 for numerical failure. Artifacts are
//! staged and moved into place only when the whole command succeeds.

mod commands;
mod settings;
mod staging;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "morphstn", version, about = "Morphable-model spatial transformer toolkit")]
pub struct Cli {
    /// File of `key = value` lines using long option names; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic morphable model.
    GenModel(GenModelArgs),
    /// Flatten a mesh onto a grid model.
    Flatten(FlattenArgs),
    /// Check every backward pass against finite differences.
    GradCheck(GradCheckArgs),
    /// Fit pose and shape to an image and landmarks.
    Fit(FitArgs),
    /// Sample an image under given parameters into the flattened frame.
    Sample(SampleArgs),
    /// Mask-weighted average of flattened images.
    Average(AverageArgs),
    /// Render seeded synthetic scenes.
    SynthData(SynthDataArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid rows.
    #[arg(long)]
    pub height: Option<usize>,
    /// Grid columns.
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of basis modes.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Add the nose-like bump (non-convex surface).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub nose_bump: Option<bool>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlattenArgs {
    /// Wavefront OBJ mesh.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Boundary and symmetry-line sidecar.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// `uniform` or `cotangent`.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Synthetic modes generated on the embedding.
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub probes: Option<usize>,
    /// Also write the report table here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Ground-truth parameters, to report recovery errors.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// `landmark-box` or `zeros`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub step_decay: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub landmark_weight: Option<f64>,
    #[arg(long)]
    pub symmetry_weight: Option<f64>,
    #[arg(long)]
    pub multiview_weight: Option<f64>,
    #[arg(long)]
    pub prior_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub theta: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AverageArgs {
    /// A flattened image and its mask; repeat for each input.
    #[arg(long = "pair", num_args = 2, value_names = ["IMAGE", "MASK"], action = clap::ArgAction::Append)]
    pub pairs: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Coverage map; defaults to `<output stem>_coverage.png`.
    #[arg(long)]
    pub coverage: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Landmark noise standard deviation in pixels.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub max_yaw: Option<f64>,
    #[arg(long)]
    pub max_pitch: Option<f64>,
    #[arg(long)]
    pub max_roll: Option<f64>,
    #[arg(long)]
    pub min_scale: Option<f64>,
    #[arg(long)]
    pub max_scale: Option<f64>,
    /// Largest translation offset from the image centre, in pixels.
    #[arg(long)]
    pub max_offset: Option<f64>,
    #[arg(long)]
    pub alpha_std: Option<f64>,
}

/// Outcome of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub(crate) fn input(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<morphstn::Error> for CliError {
    fn from(e: morphstn::Error) -> Self {
        CliError {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

/// Runs a parsed command line on a pool capped at `--threads`.
pub fn run(cli: Cli) -> CommandResult {
    let outcome = Settings::load(cli.config.as_deref()).and_then(|settings| {
        let threads = settings.get(cli.threads, "threads")?;
        if threads == Some(0) {
            return Err(CliError::input("--threads must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .map_err(|e| CliError::input(format!("cannot start worker threads: {e}")))?;
        pool.install(|| commands::dispatch(&cli.command, &settings))
    });
    match outcome {
        Ok((summary, artifacts)) => CommandResult {
            exit_code: 0,
            summary,
            artifacts,
        },
        Err(e) => CommandResult {
            exit_code: e.code,
            summary: format!("error: {}", e.message),
            artifacts: Vec::new(),
        },
    }
}

/// Parses `args` (program name first) and runs the command. Usage errors
/// map to exit code 1; `--help` and `--version` to 0.
pub fn run_from_args<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => CommandResult {
            exit_code: if e.use_stderr() { 1 } else { 0 },
            summary: e.render().to_string(),
            artifacts: Vec::new(),
        },
    }
}
