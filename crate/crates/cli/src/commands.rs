use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use mf3d_core::camera::fit_rig_to_model;
use mf3d_core::capture::capture_scene;
use mf3d_core::eval::{ablation_csv, confusion, confusion_where, metrics, views_ablation, AblationConfig, GroundTruth, Metrics, OracleSource};
use mf3d_core::fusion::{class_palette, inpaint_knn, LabelsJson, Segmenter, TextEmbeddingSet};
use mf3d_core::geom::{save_model, PlyOptions};
use mf3d_core::proposal::{read_mask_cache, write_mask_cache, BundleIndex, MaskCache};
use mf3d_core::render::render_views;
use mf3d_core::synth::{build_fixture, make_scene, oracle_text_embeddings, write_fixture, FixtureOptions, SynthKind, RIG_FILE};
use mf3d_core::{Model, ModelKind, PointSet, RenderOutput, Rig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const RENDERS_DIR: &str = "renders";
pub const LABELS_FILE: &str = "labels.json";
pub const SEGMENTED_PLY: &str = "segmented.ply";
pub const TIMING_FILE: &str = "timing.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const CLOUD_PLY: &str = "cloud.ply";
pub const CAPTURE_JSON: &str = "capture.json";
pub const DEFAULT_CACHE_SUBDIR: &str = "cache";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.require(&cfg.model, "model (--model)")?;
    Ok(Model::load(&path, ModelKind::Auto)?)
}

/// Renders of every rig view: read from `renders` when given, otherwise
/// rendered from `model`.
fn renders_for(cfg: &RunConfig, rig: &Rig, model: &Model) -> Result<Vec<RenderOutput>> {
    match &cfg.renders {
        Some(dir) => {
            if !dir.exists() {
                return Err(mf3d_core::Error::MissingInput(dir.clone()).into());
            }
            rig.poses()
                .iter()
                .map(|p| RenderOutput::read_from_dir(dir, p.view_index).map_err(CliError::from))
                .collect()
        }
        None => Ok(render_views(model, rig.poses(), cfg.splat_px)?),
    }
}

pub fn render(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let rig = Rig(fit_rig_to_model(&model.points(), cfg.views, cfg.intrinsics, cfg.elevation_deg)?);
    let renders = render_views(&model, rig.poses(), cfg.splat_px)?;
    let dir = cfg.out.join(RENDERS_DIR);
    for r in &renders {
        r.write_to_dir(&dir)?;
    }
    rig.write(&cfg.out.join(RIG_FILE))?;
    println!("rendered {} views of {} points to {}", renders.len(), model.point_count(), dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheStatus {
    /// No cache entry existed; masks were lifted and cached.
    Cold,
    /// The cached mask matrix was used; no mask files were read.
    Warm,
    /// An unusable cache entry was replaced.
    Rebuilt,
    /// Caching was turned off for this run.
    Disabled,
}

#[derive(Debug, Serialize)]
pub struct SegmentReport {
    pub cache: CacheStatus,
    pub rle_reads: usize,
    pub points: usize,
    pub masks: usize,
    pub prompts: usize,
    pub render_ms: f64,
    pub lift_ms: f64,
    pub classify_ms: f64,
    pub fuse_ms: f64,
    pub assign_ms: f64,
    pub total_ms: f64,
}

impl CacheStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheStatus::Cold => "cold",
            CacheStatus::Warm => "warm",
            CacheStatus::Rebuilt => "rebuilt",
            CacheStatus::Disabled => "disabled",
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Exclusive-create lock file; removed on drop.
struct CacheLock(PathBuf);

impl CacheLock {
    fn acquire(path: PathBuf) -> Option<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Some(Self(path)),
            Err(e) => {
                warn!("cache lock {} unavailable ({e}); not updating the cache", path.display());
                None
            }
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn cache_dir(cfg: &RunConfig) -> PathBuf {
    cfg.cache_dir.clone().unwrap_or_else(|| cfg.out.join(DEFAULT_CACHE_SUBDIR))
}

pub fn segment(cfg: &RunConfig, use_cache: bool) -> Result<SegmentReport> {
    let start = Instant::now();
    let model = load_model(cfg)?;
    let bundle_dir = cfg.require(&cfg.bundle, "bundle (--bundle)")?;
    let prompts_dir = cfg.require(&cfg.prompts, "prompt embeddings (--prompts)")?;
    let p = model.point_count();
    let text = TextEmbeddingSet::read(&prompts_dir)?;
    let index = BundleIndex::open(&bundle_dir)?;
    let key = index.cache_key();
    let cache_path = cache_dir(cfg).join(format!("{}.mskc", hex::encode(key)));

    let mut status = if use_cache { CacheStatus::Cold } else { CacheStatus::Disabled };
    let mut cached = None;
    if use_cache && cache_path.exists() {
        match read_mask_cache(&cache_path) {
            Ok(c) if c.key != key => warn!("cache {} belongs to another bundle; rebuilding", cache_path.display()),
            Ok(c) if c.matrix.rows() != p => warn!(
                "cache {} has {} points, model has {p}; rebuilding",
                cache_path.display(),
                c.matrix.rows()
            ),
            Ok(c) if c.min_pixels as usize != cfg.min_pixels => info!(
                "cache {} was built with min_pixels {}; rebuilding",
                cache_path.display(),
                c.min_pixels
            ),
            Ok(c) => cached = Some(c.matrix),
            Err(e) => warn!("cache {} is unreadable ({e}); rebuilding", cache_path.display()),
        }
        if cached.is_none() {
            status = CacheStatus::Rebuilt;
        }
    }

    let (mut render_time, mut lift_time, mut rle_reads) = (Duration::ZERO, Duration::ZERO, 0);
    let segmenter = match cached {
        Some(matrix) => {
            status = CacheStatus::Warm;
            Segmenter::from_cached(matrix, &index)?
        }
        None => {
            let t = Instant::now();
            let renders = renders_for(cfg, index.rig(), &model)?;
            render_time = t.elapsed();
            let t = Instant::now();
            rle_reads = index.mask_refs().len();
            let bundle = index.clone().into_bundle()?;
            let seg = Segmenter::from_bundle(&bundle, &renders, p, cfg.min_pixels)?;
            lift_time = t.elapsed();
            if use_cache {
                store_cache(&cache_path, key, cfg.min_pixels, &seg)?;
            }
            seg
        }
    };

    let (mut field, timing) = segmenter.segment_timed(&text, cfg.tau, cfg.normalization)?;
    let coverage: Vec<u32> = (0..p).map(|i| segmenter.masks().coverage(i) as u32).collect();
    if let Some(k) = cfg.inpaint_k {
        inpaint_knn(&mut field, &coverage, model.points().positions(), k)?;
    }
    let labels = LabelsJson {
        tau: cfg.tau,
        prompts: text.prompts().to_vec(),
        labels: field.labels,
        views: Some(index.rig().len()),
        coverage: Some(coverage),
    };
    labels.write(&cfg.out.join(LABELS_FILE))?;
    let palette = class_palette(text.len());
    save_model(
        &model,
        &cfg.out.join(SEGMENTED_PLY),
        Some(&labels.labels),
        Some(&palette),
        &PlyOptions::default(),
    )?;
    let report = SegmentReport {
        cache: status,
        rle_reads,
        points: p,
        masks: segmenter.masks().cols(),
        prompts: text.len(),
        render_ms: ms(render_time),
        lift_ms: ms(lift_time),
        classify_ms: ms(timing.classify),
        fuse_ms: ms(timing.fuse),
        assign_ms: ms(timing.assign),
        total_ms: ms(start.elapsed()),
    };
    write_json(&cfg.out.join(TIMING_FILE), &report)?;
    println!(
        "segmented {p} points into {} classes ({} cache; classify {:.2} ms, fuse {:.2} ms, total {:.2} ms)",
        text.len(),
        report.cache.as_str(),
        report.classify_ms,
        report.fuse_ms,
        report.total_ms
    );
    Ok(report)
}

fn store_cache(path: &Path, key: [u8; 32], min_pixels: usize, seg: &Segmenter) -> Result<()> {
    let dir = path.parent().expect("cache file has a directory");
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut lock = path.as_os_str().to_owned();
    lock.push(".lock");
    if let Some(_guard) = CacheLock::acquire(PathBuf::from(lock)) {
        let min_pixels = u32::try_from(min_pixels)
            .map_err(|_| CliError::Usage(format!("min_pixels {min_pixels} does not fit the cache format")))?;
        write_mask_cache(
            path,
            &MaskCache {
                key,
                min_pixels,
                matrix: seg.masks().clone(),
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub points: usize,
    pub labeled_points: u64,
    pub predicted_other: usize,
    /// Restricted to points covered by at least one mask, when the labels
    /// file records coverage and some labeled point is covered.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covered: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covered_fraction: Option<f64>,
}

pub fn eval(cfg: &RunConfig, count_other_in_oa: bool) -> Result<EvalReport> {
    let labels_path = cfg.require(&cfg.labels, "labels (--labels)")?;
    let gt_path = cfg.require(&cfg.gt, "ground truth (--gt)")?;
    let labels = LabelsJson::read(&labels_path)?;
    let gt = GroundTruth::read(&gt_path)?.aligned_to(&labels.prompts)?;
    let k = labels.prompts.len();
    let cm = confusion(&labels.labels, &gt, k)?;
    let m = metrics(&cm, count_other_in_oa)?;
    let covered_mask: Option<Vec<bool>> = match &labels.coverage {
        Some(c) if c.len() == gt.len() => Some(c.iter().map(|&n| n > 0).collect()),
        Some(c) => {
            return Err(mf3d_core::Error::DimensionMismatch(format!(
                "{} coverage entries for {} points",
                c.len(),
                gt.len()
            ))
            .into())
        }
        None => None,
    };
    let covered = match &covered_mask {
        Some(mask) => match metrics(&confusion_where(&labels.labels, &gt, k, Some(mask))?, count_other_in_oa) {
            Ok(m) => Some(m),
            Err(mf3d_core::Error::InvalidArgument(_)) => None,
            Err(e) => return Err(e.into()),
        },
        None => None,
    };
    let report = EvalReport {
        metrics: m,
        points: gt.len(),
        labeled_points: cm.total() - cm.unlabeled(),
        predicted_other: labels.labels.iter().filter(|&&l| l as usize == k).count(),
        covered,
        covered_fraction: covered_mask
            .map(|c| c.iter().filter(|&&b| b).count() as f64 / c.len().max(1) as f64),
    };
    write_json(&cfg.out.join(METRICS_JSON), &report)?;
    let views = labels.views.map(|v| v.to_string()).unwrap_or_default();
    let csv = format!(
        "{}\n{views},{:.2},{:.2},{:.2}\n",
        mf3d_core::eval::ABLATION_CSV_HEADER,
        m.oa,
        m.macc,
        m.miou
    );
    write_file(&cfg.out.join(METRICS_CSV), csv.as_bytes())?;
    println!("OA {:.2}  mAcc {:.2}  mIoU {:.2}", m.oa, m.macc, m.miou);
    if let (Some(c), Some(f)) = (&report.covered, report.covered_fraction) {
        println!(
            "covered ({:.2}% of points): OA {:.2}  mAcc {:.2}  mIoU {:.2}",
            f * 100.0,
            c.oa,
            c.macc,
            c.miou
        );
    }
    Ok(report)
}

pub enum AblationInput {
    Synth(SynthKind),
    /// Model plus ground truth; proposals are cut from the ground truth.
    Files,
}

pub fn ablate_views(cfg: &RunConfig, input: AblationInput, view_counts: Vec<usize>) -> Result<()> {
    let (model, gt) = match input {
        AblationInput::Synth(kind) => {
            let scene = make_scene(kind)?;
            (scene.model(), scene.ground_truth())
        }
        AblationInput::Files => {
            let model = load_model(cfg)?;
            let gt_path = cfg.require(&cfg.gt, "ground truth (--gt)")?;
            (model, GroundTruth::read(&gt_path)?)
        }
    };
    let text = oracle_text_embeddings(&gt.prompts)?;
    let source = OracleSource {
        gt: gt.labels.clone(),
        classes: gt.classes(),
    };
    let config = AblationConfig {
        view_counts,
        intrinsics: cfg.intrinsics,
        elevation_deg: cfg.elevation_deg,
        splat_px: cfg.splat_px,
        tau: cfg.tau,
        normalization: cfg.normalization,
        min_pixels: cfg.min_pixels,
        count_other_in_oa: false,
    };
    let rows = views_ablation(&model, &text, &source, &gt.labels, &config)?;
    let csv = ablation_csv(&rows);
    write_file(&cfg.out.join(ABLATION_CSV), csv.as_bytes())?;
    write_json(&cfg.out.join(ABLATION_JSON), &rows)?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CaptureReport {
    pub points: usize,
    pub merged: usize,
    pub removed: usize,
    pub warnings: Vec<String>,
}

pub fn capture(cfg: &RunConfig, input: &Path) -> Result<CaptureReport> {
    if !input.exists() {
        return Err(mf3d_core::Error::MissingInput(input.to_path_buf()).into());
    }
    let result = capture_scene(input, &cfg.capture)?;
    let cloud = if result.cloud.is_empty() { PointSet::new(Vec::new())? } else { result.cloud };
    save_model(&Model::Points(cloud.clone()), &cfg.out.join(CLOUD_PLY), None, None, &PlyOptions::default())?;
    let report = CaptureReport {
        points: cloud.len(),
        merged: result.merged_count,
        removed: result.removed,
        warnings: result.warnings,
    };
    write_json(&cfg.out.join(CAPTURE_JSON), &report)?;
    println!(
        "captured {} points ({} merged, {} removed as outliers)",
        report.points, report.merged, report.removed
    );
    Ok(report)
}

pub fn synth(cfg: &RunConfig, kind: SynthKind) -> Result<()> {
    let fixture = build_fixture(
        kind,
        &FixtureOptions {
            views: cfg.views,
            intrinsics: cfg.intrinsics,
            elevation_deg: cfg.elevation_deg,
        },
    )?;
    write_fixture(&fixture, &cfg.out)?;
    println!(
        "wrote {kind} fixture ({} points, {} classes, {} views, {} masks) to {}",
        fixture.scene.gt.len(),
        fixture.scene.classes(),
        fixture.rig.len(),
        fixture.bundle.len(),
        cfg.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FileConfig, Overrides};

    #[test]
    fn missing_model_is_a_usage_error_naming_the_path() {
        let mut cfg = RunConfig::resolve(FileConfig::default(), &Overrides::default(), None).unwrap();
        cfg.model = Some(PathBuf::from("/nonexistent/model.ply"));
        let err = render(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/model.ply"));
    }

    #[test]
    fn lock_is_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lock");
        {
            let held = CacheLock::acquire(path.clone()).unwrap();
            assert!(CacheLock::acquire(path.clone()).is_none());
            drop(held);
        }
        assert!(CacheLock::acquire(path).is_some());
    }
}
