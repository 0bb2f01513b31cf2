use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use labelmend::graphbuild::Symmetrize;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "labelmend",
    version,
    about = "Detect and correct noisy pixel labels with superpixel graph attention"
)]
struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Class activation maps and initial labels from a feature stack.
    Label(LabelArgs),
    /// Mark clean pixels by thresholding the clean-model loss.
    Detect(DetectArgs),
    /// Choose the loss threshold meeting a target precision on labeled data.
    SelectTheta(SelectThetaArgs),
    /// SLIC superpixels of an image.
    Superpixels(SuperpixelArgs),
    /// Superpixel graph with node features and filtered adjacency.
    Graph(GraphArgs),
    /// Run detection and correction over a manifest.
    Correct(CorrectArgs),
    /// Compare label maps against ground truth.
    Eval(EvalArgs),
    /// Generate synthetic scenes and manifests.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Feature stack `[K,H,W]`.
    #[arg(long)]
    features: PathBuf,
    /// Classifier weights `[C-1,K]`.
    #[arg(long)]
    weights: PathBuf,
    /// Comma-separated foreground classes present in the image.
    #[arg(long, value_delimiter = ',', required = true)]
    relevant: Vec<u8>,
    #[arg(long, default_value_t = labelmend::camlab::DEFAULT_BACKGROUND_THRESHOLD)]
    bg_thresh: f64,
    /// Optional foreground threshold; pixels between the two stay unlabeled.
    #[arg(long)]
    fg_thresh: Option<f64>,
    /// Initial label map (PGM).
    #[arg(long)]
    out: PathBuf,
    /// Also write the normalized score planes.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    /// Also write a colour overlay (PPM).
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Clean-model probabilities `[C,H,W]`.
    #[arg(long)]
    probs: PathBuf,
    /// Initial label map (PGM).
    #[arg(long)]
    init: PathBuf,
    #[arg(long, default_value_t = labelmend::detector::DEFAULT_THETA)]
    theta: f64,
    /// Clean labels (PGM); noisy pixels are written as unlabeled.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-pixel losses `[H,W]`.
    #[arg(long)]
    losses_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectThetaArgs {
    /// TSV of image id, probabilities, initial labels, ground truth.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = labelmend::detector::DEFAULT_TARGET_PRECISION)]
    target_precision: f64,
    /// Comma-separated ascending candidates (default: 40 log-spaced values
    /// in [1e-5, 1e-1]).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct SuperpixelArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = labelmend::superpixel::DEFAULT_SUPERPIXELS)]
    count: usize,
    #[arg(long, default_value_t = labelmend::superpixel::DEFAULT_COMPACTNESS)]
    compactness: f64,
    #[arg(long, default_value_t = labelmend::superpixel::DEFAULT_ITERATIONS)]
    iterations: usize,
    /// Assignment `[H,W]` with ids stored as f32.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("node_features").required(true).args(["features", "handcrafted"]))]
struct GraphArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    superpixels: PathBuf,
    /// Dense feature maps `[C,h,w]`, upsampled and pooled per superpixel.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Colour and position descriptors instead of dense features.
    #[arg(long)]
    handcrafted: bool,
    #[arg(long, default_value = "or")]
    edge_symmetrize: Symmetrize,
    #[arg(long)]
    out: PathBuf,
}

/// Values given here override the config file, which overrides defaults.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub bg_thresh: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub target_precision: Option<f64>,
    #[arg(long)]
    pub superpixels: Option<usize>,
    #[arg(long)]
    pub compactness: Option<f64>,
    #[arg(long)]
    pub slic_iterations: Option<usize>,
    #[arg(long)]
    pub edge_symmetrize: Option<Symmetrize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub att_dim: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Global seed, mixed with each image id.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per logical CPU).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Let network predictions replace seeded superpixel labels too.
    #[arg(long, num_args = 0..=1, default_missing_value = "on", value_parser = parse_switch)]
    pub trust_gat_everywhere: Option<bool>,
    /// Classifier weights `[C-1,K]`; makes the CAM manifest column a feature stack.
    #[arg(long)]
    pub classifier_weights: Option<PathBuf>,
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

#[derive(Debug, Args)]
struct CorrectArgs {
    /// TSV of image id, image, probabilities, features or HANDCRAFTED,
    /// relevant classes, ground truth or `-`, CAM input.
    #[arg(long)]
    manifest: PathBuf,
    /// TOML file with pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    outdir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted `<id>.pgm` maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory holding `<id>_gt.pgm` or `<id>.pgm`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Largest valid label plus one.
    #[arg(long, default_value_t = 21)]
    num_classes: usize,
    /// Average IoU over this fixed class list instead of present classes.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u8>>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene or `[suite]` TOML; a default ten-scene suite when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    outdir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
