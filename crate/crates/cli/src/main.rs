//! `mf3d`: render, segment, evaluate, capture and generate fixtures.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mf3d_core::synth::SynthKind;
use mf3d_core::Normalization;

use crate::commands::AblationInput;
use crate::config::{FileConfig, Overrides, RunConfig, CACHE_ENV};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "mf3d", version, about = "Open-vocabulary 3D segmentation by multi-view mask fusion")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Score threshold below which a point is labeled "other".
    #[arg(long, global = true, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Number of ring views.
    #[arg(long, global = true)]
    views: Option<usize>,
    #[arg(long, global = true, value_name = "none|coverage")]
    normalization: Option<Normalization>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the model from a fitted ring rig.
    Render {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        elevation: Option<f64>,
        /// Point splat radius in pixels (point clouds only).
        #[arg(long)]
        splat_px: Option<f64>,
    },
    /// Lift a proposal bundle, classify it against prompts and fuse per point.
    Segment {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Directory holding prompts.json and text_embeddings.f32.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Renders of the bundle views; rendered on demand when absent.
        #[arg(long)]
        renders: Option<PathBuf>,
        #[arg(long)]
        min_pixels: Option<usize>,
        /// Label uncovered points by vote of their k nearest covered points.
        #[arg(long, value_name = "K")]
        inpaint_k: Option<usize>,
        /// Neither read nor write the mask-matrix cache.
        #[arg(long)]
        no_cache: bool,
    },
    /// Score labels against ground truth.
    Eval {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Count "other" predictions as a class of their own in OA.
        #[arg(long)]
        count_other_in_oa: bool,
    },
    /// Re-run the pipeline at several view counts with ground-truth proposals.
    AblateViews {
        /// Use a built-in fixture instead of --model/--gt.
        #[arg(long, conflicts_with_all = ["model", "gt"])]
        synth: Option<SynthKind>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        view_counts: Vec<usize>,
    },
    /// Fuse calibrated depth frames into one filtered point cloud.
    Capture {
        /// Directory with calib.json and one subdirectory per camera.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        clip_min: Option<f64>,
        #[arg(long)]
        clip_max: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        min_neighbors: Option<usize>,
        #[arg(long)]
        stride: Option<u32>,
    },
    /// Write a synthetic fixture with an oracle proposal bundle.
    Synth { kind: SynthKind },
}

fn set_if<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let overrides = Overrides {
        tau: cli.tau,
        views: cli.views,
        normalization: cli.normalization,
        threads: cli.threads,
        out: cli.out,
    };
    let env_cache = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let mut cfg = RunConfig::resolve(file, &overrides, env_cache)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }

    match cli.command {
        Command::Render { model, elevation, splat_px } => {
            set_if(&mut cfg.model, model.map(Some));
            set_if(&mut cfg.elevation_deg, elevation);
            set_if(&mut cfg.splat_px, splat_px.map(Some));
            commands::render(&cfg)
        }
        Command::Segment { model, bundle, prompts, renders, min_pixels, inpaint_k, no_cache } => {
            set_if(&mut cfg.model, model.map(Some));
            set_if(&mut cfg.bundle, bundle.map(Some));
            set_if(&mut cfg.prompts, prompts.map(Some));
            set_if(&mut cfg.renders, renders.map(Some));
            set_if(&mut cfg.min_pixels, min_pixels);
            set_if(&mut cfg.inpaint_k, inpaint_k.map(Some));
            commands::segment(&cfg, !no_cache).map(drop)
        }
        Command::Eval { labels, gt, count_other_in_oa } => {
            set_if(&mut cfg.labels, labels.map(Some));
            set_if(&mut cfg.gt, gt.map(Some));
            commands::eval(&cfg, count_other_in_oa).map(drop)
        }
        Command::AblateViews { synth, model, gt, view_counts } => {
            set_if(&mut cfg.model, model.map(Some));
            set_if(&mut cfg.gt, gt.map(Some));
            let input = synth.map_or(AblationInput::Files, AblationInput::Synth);
            commands::ablate_views(&cfg, input, view_counts)
        }
        Command::Capture { input, clip_min, clip_max, radius, min_neighbors, stride } => {
            let c = &mut cfg.capture;
            set_if(&mut c.clip_min, clip_min);
            set_if(&mut c.clip_max, clip_max);
            set_if(&mut c.radius, radius);
            set_if(&mut c.min_neighbors, min_neighbors);
            set_if(&mut c.stride, stride);
            commands::capture(&cfg, &input).map(drop)
        }
        Command::Synth { kind } => commands::synth(&cfg, kind),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
