use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "svrecon", version, about = "Slice-to-volume reconstruction of motion-corrupted MRI stacks")]
pub struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "SVRECON_THREADS")]
    pub threads: Option<usize>,

    /// Log more (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate motion-corrupted stacks of a phantom.
    Simulate(SimulateArgs),
    /// Fit the neural field to a stack bundle and render a volume.
    Reconstruct(ReconstructArgs),
    /// Train a noise head on a checkpoint's render and run the diffusion refinement.
    Refine(RefineArgs),
    /// Render a checkpoint on an isotropic grid.
    Render(RenderArgs),
    /// Compare a volume against a reference.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MotionPreset {
    None,
    Mild,
    Severe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Phantom description (JSON list of ellipsoids); built-in brain phantom when absent.
    #[arg(long)]
    pub phantom: Option<PathBuf>,
    /// Output directory for the bundle, truth transforms and phantom.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub stacks: usize,
    /// Comma-separated planes; cycles axial, coronal, sagittal when absent.
    #[arg(long, value_delimiter = ',')]
    pub orientations: Option<Vec<Plane>>,
    #[arg(long, value_enum, default_value_t = MotionPreset::Mild)]
    pub motion_preset: MotionPreset,
    /// Additive Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Phantom grid size per axis.
    #[arg(long, default_value_t = 96)]
    pub dims: usize,
    /// Phantom voxel spacing (mm).
    #[arg(long, default_value_t = 0.8)]
    pub spacing: f64,
    /// In-plane pixel spacing (mm).
    #[arg(long, default_value_t = 0.8)]
    pub r1: f64,
    /// Slice thickness (mm).
    #[arg(long, default_value_t = 2.4)]
    pub r3: f64,
    /// PSF samples per simulated pixel.
    #[arg(long, default_value_t = 128)]
    pub k_sim: usize,
    #[arg(long, default_value_t = 0.3)]
    pub bias_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub scale_jitter: f64,
    /// Gaussian translation error (mm per axis) added to the written poses.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_mm: f64,
    /// Gaussian rotation error (degrees per axis) added to the written poses.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_deg: f64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Stack bundle directory.
    #[arg(long)]
    pub stacks: PathBuf,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Output volume (refined unless --no-vdsg).
    #[arg(long)]
    pub volume: PathBuf,
    /// Also write the unrefined field render here.
    #[arg(long)]
    pub cinr_volume: Option<PathBuf>,
    /// Loss trace CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Overrides the configured iteration count.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Overrides the configured output spacing (mm).
    #[arg(long)]
    pub resolution: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Small hash grid and batch for CPU runs (config file values still apply on top).
    #[arg(long)]
    pub compact: bool,
    /// Zero and freeze the raw-coordinate branch.
    #[arg(long)]
    pub no_consistency_branch: bool,
    /// Stop at the field render.
    #[arg(long)]
    pub no_vdsg: bool,
    /// Refine slice poses jointly with the field.
    #[arg(long)]
    pub refine_transforms: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    pub alpha0: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Rescaled combined volume.
    #[arg(long)]
    pub out: PathBuf,
    /// Literal combined volume; defaults to `<out stem>.literal.nii`.
    #[arg(long)]
    pub literal_out: Option<PathBuf>,
    /// Render spacing (mm).
    #[arg(long, default_value_t = 0.8)]
    pub resolution: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub noise_iters: usize,
    #[arg(long, default_value_t = 4096)]
    pub noise_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub noise_lr: f64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Isotropic voxel spacing (mm).
    #[arg(long, default_value_t = 0.8)]
    pub resolution: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Intensity range for PSNR and SSIM; the reference's range when absent.
    #[arg(long)]
    pub range: Option<f64>,
}
