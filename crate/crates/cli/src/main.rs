//! `brnet`: data generation, training, evaluation, inference, ablations and
//! mesh export for the point-cloud detector.

mod commands;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use brnet::model::{HeadVariant, SamplingStrategy};
use brnet::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "brnet", version, about = "Train and run the representative-point 3D detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scenes, annotations and a manifest.
    GenData(GenDataArgs),
    /// Train from a run config; evaluates on the test split when present.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest or config dataset.
    Eval(EvalArgs),
    /// Detect boxes in one point-cloud file.
    Infer(InferArgs),
    /// Train and evaluate several head variants and sampling strategies on shared data.
    Ablate(AblateArgs),
    /// Export a cloud and its boxes as an ASCII PLY mesh.
    VizExport(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Scene spec: a preset name (oriented, axis-aligned) or a JSON file.
    #[arg(long, default_value = "oriented")]
    pub spec: String,
    /// Training scenes to write.
    #[arg(long)]
    pub count: usize,
    /// Test scenes to write, drawn from a disjoint seed stream.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<HeadVariant>,
    #[arg(long)]
    pub strategy: Option<SamplingStrategy>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest; its `test` split is evaluated unless `--split` says otherwise.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Run config whose data source supplies the scenes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Minimum confidence kept before matching.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// IoU thresholds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
    pub iou: Vec<f64>,
    /// Write the report as JSON here as well as printing the table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Emit every proposal, before thresholding and NMS.
    #[arg(long)]
    pub all: bool,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Head variants, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = HeadVariant::ALL)]
    pub variant: Vec<HeadVariant>,
    /// Sampling strategies for the representative-point variants, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Vec<SamplingStrategy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    /// Annotation or detection JSON; omitted means cloud only.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Edge prism width in meters.
    #[arg(long, default_value_t = 0.01)]
    pub edge_width: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn report_error(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": kind, "exit_code": code, "message": message } });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("BRNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BRNET_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report_error("usage", 2, &e.kind().to_string());
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::VizExport(a) => commands::viz_export(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("brnet: {e}");
            report_error(e.kind(), exit_code(&e), &e.to_string())
        }
    }
}
