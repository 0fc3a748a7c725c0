//! `catreid` command-line entry point.

mod commands;
mod reference;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "catreid", version, about = "Re-identification of individual cats from camera-trap images")]
pub struct Cli {
    /// Training and pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ManifestArgs {
    /// JSON-lines manifest of annotated images.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    /// Which attributes split a cat into entities: none, time, side or side+time.
    #[arg(long, default_value = "side+time", value_parser = ["none", "time", "side", "side+time"])]
    pub partition: String,

    /// Report malformed manifest lines and continue without them.
    #[arg(long)]
    pub skip_invalid: bool,

    /// Drop burst frames within this many seconds of the previous frame of
    /// the same camera and cat.
    #[arg(long, value_name = "SECONDS")]
    pub dedup_seconds: Option<f64>,

    /// Start of the daytime window for images without a time-of-day label.
    #[arg(long, value_name = "HH:MM", default_value = "06:00")]
    pub day_start: String,

    /// End (exclusive) of the daytime window.
    #[arg(long, value_name = "HH:MM", default_value = "18:00")]
    pub day_end: String,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a manifest, label entities and optionally split it by cat.
    Ingest {
        #[command(flatten)]
        data: ManifestArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Fraction of cats assigned to training; writes train and test manifests.
        #[arg(long)]
        split_ratio: Option<f64>,
    },
    /// Write the part quads drawn over each crop, the full crop and the seven part crops.
    CropPreview {
        #[command(flatten)]
        data: ManifestArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Only the first N records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write a contact sheet per record: the plain sample, then augmented copies, each with its part crops.
    AugmentPreview {
        #[command(flatten)]
        data: ManifestArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        /// Augmented copies per record.
        #[arg(long, default_value_t = 4)]
        copies: usize,
    },
    /// Train the multi-stream network.
    Train {
        #[command(flatten)]
        data: ManifestArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Hold out this fraction of cats; the held-out manifest is written to the output directory.
        #[arg(long)]
        split_ratio: Option<f64>,
        /// Test manifest whose images must never be trained on.
        #[arg(long, value_name = "FILE")]
        test_manifest: Option<PathBuf>,
        /// Validation manifest; the best checkpoint is kept by its mAP.
        #[arg(long, value_name = "FILE")]
        val_manifest: Option<PathBuf>,
        /// Training checkpoint to continue from.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Overrides the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop with a checkpoint after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on a manifest: every image queries all others.
    Eval {
        #[command(flatten)]
        data: ManifestArgs,
        /// Inference or training checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Render ranking sheets for the first N queries.
        #[arg(long, default_value_t = 0)]
        sheets: usize,
        /// Gallery images per ranking sheet.
        #[arg(long, default_value_t = 7)]
        k: usize,
    },
    /// Rank a gallery against one query image and render its ranking sheet.
    Query {
        #[command(flatten)]
        data: ManifestArgs,
        /// Inference or training checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Record of the manifest used as the query; the rest is the gallery.
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        query_id: Option<String>,
        /// External query image ranked against the whole manifest.
        #[arg(long, value_name = "FILE")]
        image: Option<PathBuf>,
        /// Box of the cat in the external image, `x,y,w,h`; whole image when omitted.
        #[arg(long, requires = "image", value_parser = parse_bbox)]
        bbox: Option<[f64; 4]>,
        /// Known entity of the external image, used to label matches.
        #[arg(long, requires = "image")]
        entity: Option<String>,
        /// Gallery images shown per ranking.
        #[arg(long, default_value_t = 7)]
        k: usize,
    },
    /// Write one embedding row per image to CSV.
    ExportEmbeddings {
        #[command(flatten)]
        data: ManifestArgs,
        /// Inference or training checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Project an embedding CSV to 2-D and draw a scatter plot.
    Project {
        #[arg(long, value_name = "FILE")]
        embeddings: PathBuf,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// External projector program and arguments (CSV on stdin, `id,x,y` on stdout);
        /// the built-in principal-axis projection when omitted.
        #[arg(long, num_args = 1.., allow_hyphen_values = true, value_name = "CMD")]
        projector: Option<Vec<String>>,
    },
    /// Generate the synthetic toy-cat dataset.
    ToyData {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of cats.
        #[arg(long, default_value_t = 4)]
        cats: usize,
        /// Images per cat, side and time of day.
        #[arg(long, default_value_t = 20)]
        images_per_entity: usize,
        /// The first N cats also get daytime images.
        #[arg(long, default_value_t = 1)]
        day_cats: usize,
        /// Image width in pixels.
        #[arg(long, default_value_t = 160)]
        width: usize,
        /// Image height in pixels.
        #[arg(long, default_value_t = 112)]
        height: usize,
        /// Chance that one limb or the tail is hidden.
        #[arg(long, default_value_t = 0.15)]
        occlusion: f64,
    },
    /// Write the flag and configuration reference page.
    Reference {
        /// Output file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn parse_bbox(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        &[x, y, w, h] if w > 0.0 && h > 0.0 => Ok([x, y, w, h]),
        &[_, _, _, _] => Err("box width and height must be positive".into()),
        _ => Err(format!("expected x,y,w,h, got {} values", v.len())),
    }
}

/// Exit status for each error category.
pub fn exit_code(kind: &str) -> u8 {
    match kind {
        "usage" => 2,
        "config" => 3,
        "validation" => 4,
        "missing-images" => 5,
        "io" | "image" | "format" => 6,
        "checkpoint" => 7,
        "non-finite-loss" => 8,
        "projector" => 9,
        _ => 10,
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    status: &'static str,
    kind: &'a str,
    code: u8,
    message: String,
}

fn fail(kind: &str, message: String) -> ExitCode {
    let code = exit_code(kind);
    let line = ErrorLine {
        status: "error",
        kind,
        code,
        message,
    };
    eprintln!("{}", serde_json::to_string(&line).expect("serializable error"));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
                return fail("usage", first.to_string());
            }
        },
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("serializable summary"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}

