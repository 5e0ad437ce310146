mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "stylesplat", version, about = "Gaussian splatting reconstruction and appearance-only style transfer")]
pub struct Cli {
    /// JSON file overriding training configuration defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for all outputs (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads for rendering and network evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Fit a Gaussian cloud to the training views of a scene.
    Reconstruct(ReconstructArgs),
    /// Train the depth network on renders of a cloud or on scene depth maps.
    TrainDepth(TrainDepthArgs),
    /// Appearance-only transfer toward a pool of target-style images.
    Transfer(TransferArgs),
    /// Render a cloud from the poses of a scene.
    Render(RenderArgs),
    /// Compare two folders of images.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Run the full transfer loss and its single-term ablations.
    Ablate(AblateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecName {
    Tube,
    Sphere,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "tube")]
    pub spec: SpecName,
    #[arg(long)]
    pub color_scheme: Option<String>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub train_views: Option<usize>,
    #[arg(long)]
    pub test_views: Option<usize>,
    /// Also write a 10-image recolored pool and recolored test ground truth
    /// using this color map (identity, cool, sepia).
    #[arg(long)]
    pub recolor: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Scene manifest.
    #[arg(long)]
    pub scene: PathBuf,
    /// Initial cloud; defaults to the manifest's seed cloud, else random
    /// points in the camera frusta.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Point count for random initialization.
    #[arg(long, default_value_t = 200)]
    pub init_points: usize,
    /// Camera-space depth range for random initialization.
    #[arg(long, default_value_t = 0.5)]
    pub init_near: f64,
    #[arg(long, default_value_t = 6.0)]
    pub init_far: f64,
    /// SH degree for random initialization.
    #[arg(long, default_value_t = 1)]
    pub sh_degree: usize,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainDepthArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Train on renders and rendered depth of this cloud at the training
    /// poses instead of the manifest's depth maps.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct StyleInputs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Cloud to stylize.
    #[arg(long)]
    pub cloud: PathBuf,
    /// Trained depth network; trained from the cloud's renders if omitted.
    #[arg(long)]
    pub depth_net: Option<PathBuf>,
    /// Feature extractor weights; seeded random weights if omitted.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// Folder of target-style images; defaults to the manifest's real pool.
    #[arg(long)]
    pub pool_dir: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[command(flatten)]
    pub inputs: StyleInputs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Also write depth maps.
    #[arg(long)]
    pub depth: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Produced images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference images, matched to `--pred` by file name.
    #[arg(long)]
    pub target: PathBuf,
    /// Target-style pool for the feature distance.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Measure render throughput of this cloud at 512×512 (needs `--scene`).
    #[arg(long, requires = "scene")]
    pub fps_cloud: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Renderer,
    Layers,
    Losses,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: StyleInputs,
    /// Ground truth for the test views, matched by image file name.
    #[arg(long)]
    pub target_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
