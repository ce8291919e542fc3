//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags.
//!
//! Relative paths in a config file resolve against the file's directory.

use std::path::{Path, PathBuf};

use mf3d_core::camera::{Intrinsics, DEFAULT_VIEWS};
use mf3d_core::capture::CaptureParams;
use mf3d_core::eval::MAX_VIEWS;
use mf3d_core::fusion::DEFAULT_TAU;
use mf3d_core::proposal::DEFAULT_MIN_PIXELS;
use mf3d_core::Normalization;
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const CACHE_ENV: &str = "MF3D_CACHE_DIR";

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub renders: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub tau: Option<f64>,
    pub normalization: Option<Normalization>,
    pub min_pixels: Option<usize>,
    pub splat_px: Option<f64>,
    pub inpaint_k: Option<usize>,
    pub threads: Option<usize>,
    pub rig: Option<RigFile>,
    pub capture: Option<CaptureParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub views: Option<usize>,
    pub elevation: Option<f64>,
    pub intrinsics: Option<Intrinsics>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(mf3d_core::Error::MissingInput(path.to_path_buf()).into());
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: FileConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.model,
            &mut cfg.bundle,
            &mut cfg.renders,
            &mut cfg.prompts,
            &mut cfg.labels,
            &mut cfg.gt,
            &mut cfg.out,
            &mut cfg.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Flags shared by every subcommand; `None` means "not given".
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub tau: Option<f64>,
    pub views: Option<usize>,
    pub normalization: Option<Normalization>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub renders: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub tau: f64,
    pub normalization: Normalization,
    pub min_pixels: usize,
    pub splat_px: Option<f64>,
    /// Label uncovered points from their k nearest covered neighbors.
    pub inpaint_k: Option<usize>,
    pub threads: Option<usize>,
    pub views: usize,
    pub elevation_deg: f64,
    pub intrinsics: Intrinsics,
    pub capture: CaptureParams,
}

impl RunConfig {
    /// CLI flags over file values over defaults. The cache directory comes
    /// from the environment first, then the file.
    pub fn resolve(file: FileConfig, cli: &Overrides, cache_env: Option<PathBuf>) -> Result<Self> {
        let rig = file.rig.unwrap_or_default();
        let cfg = RunConfig {
            model: file.model,
            bundle: file.bundle,
            renders: file.renders,
            prompts: file.prompts,
            labels: file.labels,
            gt: file.gt,
            out: cli.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            cache_dir: cache_env.or(file.cache_dir),
            tau: cli.tau.or(file.tau).unwrap_or(DEFAULT_TAU),
            normalization: cli.normalization.or(file.normalization).unwrap_or_default(),
            min_pixels: file.min_pixels.unwrap_or(DEFAULT_MIN_PIXELS),
            splat_px: file.splat_px,
            inpaint_k: file.inpaint_k,
            threads: cli.threads.or(file.threads),
            views: cli.views.or(rig.views).unwrap_or(DEFAULT_VIEWS),
            elevation_deg: rig.elevation.unwrap_or(0.0),
            intrinsics: rig.intrinsics.unwrap_or_default(),
            capture: file.capture.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(1..=MAX_VIEWS).contains(&self.views) {
            return Err(CliError::Usage(format!("views must be in [1, {MAX_VIEWS}], got {}", self.views)));
        }
        if !self.tau.is_finite() {
            return Err(CliError::Usage(format!("tau must be finite, got {}", self.tau)));
        }
        self.intrinsics.validate()?;
        Ok(())
    }

    /// The path for `what`, which must have been set and must exist.
    pub fn require(&self, path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| CliError::Usage(format!("no {what} given (flag or config file)")))?;
        if !p.exists() {
            return Err(mf3d_core::Error::MissingInput(p).into());
        }
        Ok(p)
    }
}
