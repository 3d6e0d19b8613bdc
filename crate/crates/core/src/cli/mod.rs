//! The `crowdkit` command-line driver.
//!
//! Commands: `gengt`, `preprocess`, `eval`, `inspect`, `log`. Human-readable
//! tables go to stdout; errors and warnings go to stderr as one JSON object
//! per line. Exit codes: 0 success, 1 usage, 2 data error, 3 I/O.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use commands::{GengtSummary, ImageSummary, OUTPUT_MANIFEST};
pub use config::{PipelineConfig, ResolvedConfig};

use crate::density::DensityError;
use crate::expdb::StoreError;
use crate::ingest::{DatasetId, IngestError};
use crate::labels::LabelError;
use crate::metrics::MetricsError;
use crate::preprocess::PreprocessError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// An error with its exit code and, when known, the image it concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    pub image_id: Option<String>,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.into(),
            image_id: None,
        }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.into(),
            image_id: None,
        }
    }

    pub fn io(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: m.into(),
            image_id: None,
        }
    }

    pub fn for_image(mut self, id: &str) -> Self {
        self.image_id = Some(id.to_string());
        self
    }

    fn to_json(&self) -> String {
        let mut v = json!({"error": self.message, "code": self.code});
        if let Some(id) = &self.image_id {
            v["image_id"] = json!(id);
        }
        v.to_string()
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => Self::io(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<DensityError> for CliError {
    fn from(e: DensityError) -> Self {
        match e {
            DensityError::Io { .. } => Self::io(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        fn is_io(e: &MetricsError) -> bool {
            match e {
                MetricsError::Io { .. } | MetricsError::Density(DensityError::Io { .. }) => true,
                MetricsError::Image { source, .. } => is_io(source),
                _ => false,
            }
        }
        let code = if is_io(&e) { EXIT_IO } else { EXIT_DATA };
        let image_id = match &e {
            MetricsError::Image { image_id, .. } => Some(image_id.clone()),
            _ => None,
        };
        Self {
            code,
            message: e.to_string(),
            image_id,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } | StoreError::Locked(_) => Self::io(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "crowdkit",
    version,
    about = "Crowd-counting ground truth, label transforms, evaluation and run logging"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct GlobalArgs {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for randomized steps (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct PipelineArgs {
    /// UCF50, SHT_A, SHT_B, WE, QNRF, GCC or CUSTOM.
    #[arg(long)]
    dataset: Option<DatasetId>,
    /// JSON list of {annotation, image} entries.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
    /// Reject out-of-bounds points instead of clamping them.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render density maps (C3DM) for every image of a manifest.
    Gengt {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Free text stored with the run.
        #[arg(long)]
        notes: Option<String>,
    },
    /// Resize images and annotations to the dataset's size rule.
    Preprocess {
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score predicted maps against ground-truth maps.
    Eval {
        /// Directory of predicted `<id>.c3dm` maps.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth `<id>.c3dm` maps.
        #[arg(long)]
        gt: PathBuf,
        /// Also compute PSNR and SSIM.
        #[arg(long)]
        quality: bool,
        /// Where report.json and per_image.csv go (default: the prediction dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print statistics of a C3DM file.
    Inspect {
        path: PathBuf,
        /// Write a peak-normalized heat map PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// List runs recorded in the experiment store.
    Log {
        #[arg(long)]
        dataset: Option<DatasetId>,
        #[arg(long)]
        run_id: Option<String>,
        /// RFC 3339 lower bound on creation time.
        #[arg(long)]
        since: Option<chrono::DateTime<chrono::Utc>>,
        /// Print each run's best epoch.
        #[arg(long)]
        best: bool,
    },
}

impl GlobalArgs {
    fn pipeline_config(&self, args: &PipelineArgs) -> Result<ResolvedConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        cfg.dataset = args.dataset.or(cfg.dataset);
        cfg.manifest = args.manifest.clone().or(cfg.manifest);
        cfg.output_dir = args.output_dir.clone().or(cfg.output_dir);
        cfg.seed = self.seed.or(cfg.seed);
        cfg.threads = self.threads.or(cfg.threads);
        if args.strict {
            cfg.strict = Some(true);
        }
        cfg.resolve()
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::Gengt { pipeline, notes } => g
            .pipeline_config(pipeline)
            .and_then(|cfg| commands::gengt(&cfg, g.store.as_deref(), notes.as_deref(), out, err).map(|_| ())),
        Command::Preprocess { pipeline } => g
            .pipeline_config(pipeline)
            .and_then(|cfg| commands::preprocess(&cfg, out, err)),
        Command::Eval {
            pred,
            gt,
            quality,
            out: dir,
        } => commands::eval(pred, gt, *quality, dir.as_deref(), g.threads, out),
        Command::Inspect { path, png } => commands::inspect(path, png.as_deref(), out),
        Command::Log {
            dataset,
            run_id,
            since,
            best,
        } => match &g.store {
            None => Err(CliError::usage("log needs --store <dir>")),
            Some(store) => commands::log(
                store,
                &crate::expdb::RunFilter {
                    dataset: *dataset,
                    run_id: run_id.clone(),
                    since: *since,
                },
                *best,
                out,
            ),
        },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json());
            e.code
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
