mod commands;
mod config;
mod error;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "nodulekit", version, about = "Thyroid-nodule ultrasound dataset preparation and scoring")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a directory of DICOM files to PNG.
    Ingest(IngestArgs),
    /// Cross-check annotations against decoded images.
    Validate(ValidateArgs),
    /// Build a dataset manifest from annotations and images.
    Manifest(ManifestArgs),
    /// Derive the V1 or V2 variant of a manifest.
    Variant(VariantArgs),
    /// Assign patients to train/val/test.
    Split(SplitArgs),
    /// Write YOLO, COCO or mask artifacts.
    Export(ExportArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Derive predictions with planted errors from ground truth.
    Perturb(PerturbArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Render an evaluation report as CSV, JSON or SVG.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub dicom_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace patient IDs with a SHA-256 prefix.
    #[arg(long)]
    pub hash_patient_ids: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Write the validation report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the annotations with in-tolerance vertices clipped here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit with a data error when the report is not clean.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// JSON object mapping image names to exclusion reasons.
    #[arg(long)]
    pub exclusions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DopplerChoice {
    /// V1: keep doppler images.
    #[arg(long)]
    pub keep_doppler: bool,
    /// V2: drop doppler images.
    #[arg(long)]
    pub drop_doppler: bool,
}

#[derive(Debug, Args)]
pub struct VariantArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub doppler: DopplerChoice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train, val and test shares, e.g. 0.8,0.15,0.05.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Re-split an already split manifest.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Yolo,
    Coco,
    Masks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BucketArg {
    Train,
    Val,
    Test,
}

impl From<BucketArg> for nodulekit::Bucket {
    fn from(b: BucketArg) -> Self {
        match b {
            BucketArg::Train => nodulekit::Bucket::Train,
            BucketArg::Val => nodulekit::Bucket::Val,
            BucketArg::Test => nodulekit::Bucket::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, value_enum)]
    pub format: ExportFormat,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Source PNG directory (YOLO only).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Restrict to one bucket (default: all).
    #[arg(long, value_enum)]
    pub bucket: Option<BucketArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub doppler_fraction: Option<f64>,
    /// Output directory for images/, annotations.json and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Only perturb images of this manifest (and bucket).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, requires = "manifest")]
    pub bucket: Option<BucketArg>,
    #[arg(long)]
    pub drop: Option<f64>,
    #[arg(long)]
    pub spurious: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpolationArg {
    Point101,
    AllPoint,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth annotations.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions file.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, requires = "manifest")]
    pub bucket: Option<BucketArg>,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub score_floor: Option<f64>,
    #[arg(long, value_enum)]
    pub interpolation: Option<InterpolationArg>,
    #[arg(long)]
    pub model_tag: Option<String>,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormatArg {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON written by `evaluate`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: ReportFormatArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nodulekit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
