//! `ava`: the avalanche debris mapping pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use ava_core::synth::{DEFAULT_RELIEF_M, DEFAULT_SIZE};
use ava_core::terrain::DEFAULT_PAR_RADIUS_M;

#[derive(Debug, Parser)]
#[command(name = "ava", version, about = "Avalanche debris mapping from SAR change features")]
pub struct Cli {
    /// Emit log records as JSON lines on stderr.
    #[arg(long, global = true, help_heading = "Global options")]
    pub json: bool,
    /// Worker threads; results do not depend on the count.
    #[arg(long, global = true, help_heading = "Global options", env = "AVA_THREADS")]
    pub threads: Option<usize>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, help_heading = "Global options")]
    pub seed: Option<u64>,
    /// Pipeline configuration JSON ({"model": {...}, "train": {...}}).
    #[arg(long, global = true, help_heading = "Global options")]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, help_heading = "Global options", action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true, help_heading = "Global options")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled scene directory.
    Synth(SynthArgs),
    /// Compute the SAR change features of a scene.
    Features(FeaturesArgs),
    /// Compute slope, release mask and PAR from a DEM.
    Terrain(TerrainArgs),
    /// Build, split and inspect patch datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the segmentation model.
    Train(TrainArgs),
    /// Predict probability and binary masks for a scene.
    Predict(PredictArgs),
    /// Extract, filter and export debris segments from a binary mask.
    Segments(SegmentsArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output scene directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub avalanches: usize,
    /// DEM relief in meters.
    #[arg(long, default_value_t = DEFAULT_RELIEF_M)]
    pub relief: f64,
    /// Scene id (default `synth-<seed>`).
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Scene directory.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output feature directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an RGB change composite (composite.png).
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TerrainOpts {
    /// PAR search radius in meters.
    #[arg(long, default_value_t = DEFAULT_PAR_RADIUS_M)]
    pub radius: f64,
    /// Lower slope bound of release terrain, degrees.
    #[arg(long, default_value_t = 35.0)]
    pub band_min: f64,
    /// Upper slope bound of release terrain, degrees.
    #[arg(long, default_value_t = 45.0)]
    pub band_max: f64,
}

#[derive(Debug, Args)]
pub struct TerrainArgs {
    /// DEM raster.
    #[arg(long)]
    pub dem: PathBuf,
    /// Output directory for slope.avrs, release.avrs and par.avrs.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub terrain: TerrainOpts,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Cut labelled scenes into patches and write a manifest.
    Build(DatasetBuildArgs),
    /// Assign whole scenes to the training or validation split.
    Split(DatasetSplitArgs),
    /// Print class statistics of a manifest as JSON.
    Stats(DatasetStatsArgs),
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    /// Labelled scene directory (repeatable).
    #[arg(long = "scene", required = true)]
    pub scenes: Vec<PathBuf>,
    /// Output dataset directory (patches and manifest.json).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ava_core::dataset::DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    /// Patch stride (default: the patch size).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Probability of keeping a patch without debris.
    #[arg(long, default_value_t = ava_core::dataset::DEFAULT_NEG_KEEP_RATE)]
    pub neg_keep: f64,
    /// Also split scenes with this validation fraction.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[command(flatten)]
    pub terrain: TerrainOpts,
}

#[derive(Debug, Args)]
pub struct DatasetSplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Where to write the split manifest (default: overwrite the input).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetStatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Cap on the positive-class weight.
    #[arg(long, default_value_t = ava_core::dataset::DEFAULT_POS_WEIGHT_CAP)]
    pub cap: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Split dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for weights, history and summary.
    #[arg(long)]
    pub out: PathBuf,
    /// Override train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override train.lr.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override train.batch_size.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlendArg {
    Hann,
    Uniform,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Scene directory (features and terrain are computed).
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    pub scene: Option<PathBuf>,
    /// Feature directory holding d_vv, d_vh, vvvh, slope and par rasters.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output directory for prob.avrs and mask.avrs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ava_model::infer::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = ava_model::infer::DEFAULT_STRIDE)]
    pub stride: usize,
    /// Test-time transforms: `all` or a comma list of identity, rot90, rot180,
    /// rot270, hflip, vflip, transpose, antitranspose.
    #[arg(long, default_value = "all")]
    pub tta: String,
    #[arg(long, value_enum, default_value_t = BlendArg::Hann)]
    pub blend: BlendArg,
    /// Windows per forward pass.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Also write PNG quicklooks.
    #[arg(long)]
    pub png: bool,
    #[command(flatten)]
    pub terrain: TerrainOpts,
}

#[derive(Debug, Args)]
pub struct SegmentsArgs {
    /// Binary mask raster.
    #[arg(long)]
    pub mask: PathBuf,
    /// GeoJSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Mask of kept segments (AVRS).
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    /// DEM for elevation attributes and the elevation rule.
    #[arg(long)]
    pub dem: Option<PathBuf>,
    /// PAR raster (degrees) for the max_par attribute.
    #[arg(long)]
    pub par: Option<PathBuf>,
    /// d_vv raster for the mean_d_vv attribute.
    #[arg(long)]
    pub d_vv: Option<PathBuf>,
    #[arg(long)]
    pub min_area: Option<f64>,
    #[arg(long, requires = "elev_max")]
    pub elev_min: Option<f64>,
    #[arg(long, requires = "elev_min")]
    pub elev_max: Option<f64>,
    /// Segments touching this mask are rejected.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Segments must overlap this mask by --min-runout-overlap.
    #[arg(long)]
    pub runout: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub min_runout_overlap: f64,
    /// 4 or 8.
    #[arg(long, default_value_t = 8)]
    pub connectivity: u8,
    /// Export rejected segments with a reject_reason property.
    #[arg(long)]
    pub include_rejected: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Probability raster (repeatable, paired with --gt in order).
    #[arg(long = "pred", required = true)]
    pub preds: Vec<PathBuf>,
    /// Ground-truth label raster (repeatable).
    #[arg(long = "gt", required = true)]
    pub gts: Vec<PathBuf>,
    /// Scene ids (default: the prediction file's parent directory name).
    #[arg(long = "id")]
    pub ids: Vec<String>,
    /// Report path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Add a threshold curve at 0.1, 0.2, ..., 0.9.
    #[arg(long)]
    pub sweep: bool,
    /// Minimum shared pixels for an event match.
    #[arg(long, default_value_t = 1)]
    pub min_overlap: usize,
    /// Also require this IoU for an event match.
    #[arg(long)]
    pub min_iou: Option<f64>,
    /// Drop predicted segments smaller than this before matching.
    #[arg(long)]
    pub min_area: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub connectivity: u8,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let mut b = env_logger::Builder::new();
    b.filter_level(level).target(env_logger::Target::Stderr);
    if cli.json {
        b.format(|buf, rec| {
            let line = serde_json::json!({
                "level": rec.level().as_str(),
                "target": rec.target(),
                "message": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    } else {
        b.format(|buf, rec| writeln!(buf, "[{}] {}", rec.level(), rec.args()));
    }
    b.init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_logging(&cli);
    if let Some(n) = cli.threads {
        if n == 0 {
            log::error!("--threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::error!("cannot configure the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
