//! Segmentation metrics and the views-ablation harness.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{fit_rig_to_model, Intrinsics, Rig};
use crate::error::{Error, Result};
use crate::fusion::{Normalization, Segmenter, TextEmbeddingSet, DEFAULT_TAU};
use crate::geom::Model;
use crate::io_util::{read_json, write_json};
use crate::proposal::{ProposalBundle, DEFAULT_MIN_PIXELS};
use crate::render::{render_views, RenderOutput};

pub const ABLATION_CSV_HEADER: &str = "views,OA,mAcc,mIoU";
pub const MAX_VIEWS: usize = 64;

/// `(K+1) x (K+1)` counts; row = ground truth, column = prediction, index
/// `K` = other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; (classes + 1) * (classes + 1)],
        }
    }

    /// Builds from a row-major `(K+1) x (K+1)` table.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("confusion table must be square and non-empty".into()));
        }
        Ok(Self {
            classes: n - 1,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    /// Number of real classes `K`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.classes + 1) + pred]
    }

    fn add(&mut self, gt: usize, pred: usize, n: u64) {
        self.counts[gt * (self.classes + 1) + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        (0..=self.classes).map(|p| self.get(gt, p)).sum()
    }

    /// Points whose ground truth is "other".
    pub fn unlabeled(&self) -> u64 {
        self.row_sum(self.classes)
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes + 1).map(<[u64]>::to_vec).collect()
    }
}

/// Tallies `(gt[p], pred[p])` over all points.
pub fn confusion(pred: &[u32], gt: &[u32], classes: usize) -> Result<ConfusionMatrix> {
    confusion_where(pred, gt, classes, None)
}

/// Like [`confusion`], restricted to points with `include[p]`.
pub fn confusion_where(pred: &[u32], gt: &[u32], classes: usize, include: Option<&[bool]>) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() || include.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if let Some((i, v)) = pred.iter().chain(gt).enumerate().find(|(_, &v)| v as usize > classes) {
        return Err(Error::InvalidArgument(format!(
            "label {v} at position {} exceeds K = {classes}",
            i % pred.len().max(1)
        )));
    }
    const CHUNK: usize = 1 << 14;
    let cm = pred
        .par_chunks(CHUNK)
        .zip(gt.par_chunks(CHUNK))
        .enumerate()
        .map(|(c, (ps, gs))| {
            let mut cm = ConfusionMatrix::zeros(classes);
            for (i, (&p, &g)) in ps.iter().zip(gs).enumerate() {
                if include.is_none_or(|m| m[c * CHUNK + i]) {
                    cm.add(g as usize, p as usize, 1);
                }
            }
            cm
        })
        .reduce(
            || ConfusionMatrix::zeros(classes),
            |mut a, b| {
                for (x, y) in a.counts.iter_mut().zip(b.counts) {
                    *x += y;
                }
                a
            },
        );
    Ok(cm)
}

/// Percentages rounded to two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "mAcc")]
    pub macc: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
}

fn percent(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

/// OA over labeled points (plus unlabeled ones when `count_other_in_oa`,
/// where predicting other counts as correct); mAcc over classes with a
/// nonzero gt row; mIoU over classes present in gt or predictions, with
/// unlabeled points left out of column sums.
pub fn metrics(cm: &ConfusionMatrix, count_other_in_oa: bool) -> Result<Metrics> {
    let k = cm.classes;
    let labeled: u64 = (0..k).map(|g| cm.row_sum(g)).sum();
    let correct: u64 = (0..k).map(|g| cm.get(g, g)).sum();
    let (num, den) = if count_other_in_oa {
        (correct + cm.get(k, k), labeled + cm.unlabeled())
    } else {
        (correct, labeled)
    };
    if den == 0 || labeled == 0 {
        return Err(Error::InvalidArgument("no labeled points to evaluate".into()));
    }
    let mut accs = Vec::new();
    let mut ious = Vec::new();
    for c in 0..k {
        let row = cm.row_sum(c);
        let col: u64 = (0..k).map(|g| cm.get(g, c)).sum();
        let diag = cm.get(c, c);
        if row > 0 {
            accs.push(diag as f64 / row as f64);
        }
        if row > 0 || col > 0 {
            ious.push(diag as f64 / (row + col - diag) as f64);
        }
    }
    // Summing in sorted order makes the means independent of class order.
    let mean = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok(Metrics {
        oa: percent(num as f64 / den as f64),
        macc: percent(mean(&mut accs)),
        miou: percent(mean(&mut ious)),
    })
}

/// `gt.json`: prompts and one class id per point (`K` = unlabeled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub prompts: Vec<String>,
    pub labels: Vec<u32>,
}

impl GroundTruth {
    pub fn new(prompts: Vec<String>, labels: Vec<u32>) -> Result<Self> {
        let gt = Self { prompts, labels };
        gt.validate()?;
        Ok(gt)
    }

    fn validate(&self) -> Result<()> {
        let k = self.prompts.len() as u32;
        if let Some(i) = self.labels.iter().position(|&l| l > k) {
            return Err(Error::Format(format!(
                "ground-truth label {} at point {i} exceeds K = {k}",
                self.labels[i]
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.prompts.len()
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let gt: Self = read_json(path)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Labels re-indexed to `prompts` order. The prompt sets must match.
    pub fn aligned_to(&self, prompts: &[String]) -> Result<Vec<u32>> {
        let mut sorted_a: Vec<&String> = self.prompts.iter().collect();
        let mut sorted_b: Vec<&String> = prompts.iter().collect();
        sorted_a.sort();
        sorted_b.sort();
        if sorted_a != sorted_b {
            return Err(Error::Format(format!(
                "ground-truth prompts {:?} differ from label prompts {:?}",
                self.prompts, prompts
            )));
        }
        let map: Vec<u32> = self
            .prompts
            .iter()
            .map(|p| prompts.iter().position(|q| q == p).expect("same set") as u32)
            .collect();
        let k = self.prompts.len() as u32;
        Ok(self
            .labels
            .iter()
            .map(|&l| if l == k { k } else { map[l as usize] })
            .collect())
    }
}

/// Supplies a proposal bundle for a rig and its renders.
pub trait ProposalSource: Sync {
    fn bundle(&self, rig: &Rig, renders: &[RenderOutput]) -> Result<ProposalBundle>;
}

/// Masks cut exactly along ground-truth regions with one-hot embeddings.
#[derive(Debug, Clone)]
pub struct OracleSource {
    pub gt: Vec<u32>,
    pub classes: usize,
}

impl ProposalSource for OracleSource {
    fn bundle(&self, rig: &Rig, renders: &[RenderOutput]) -> Result<ProposalBundle> {
        crate::synth::oracle_bundle(rig, renders, &self.gt, self.classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub view_counts: Vec<usize>,
    pub intrinsics: Intrinsics,
    pub elevation_deg: f64,
    pub splat_px: Option<f64>,
    pub tau: f64,
    pub normalization: Normalization,
    pub min_pixels: usize,
    pub count_other_in_oa: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            view_counts: vec![2, 4, 8, 16],
            intrinsics: Intrinsics::default(),
            elevation_deg: 0.0,
            splat_px: None,
            tau: DEFAULT_TAU,
            normalization: Normalization::Coverage,
            min_pixels: DEFAULT_MIN_PIXELS,
            count_other_in_oa: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub views: usize,
    /// Over every labeled point; uncovered points count as errors.
    pub metrics: Metrics,
    /// Over labeled points covered by at least one mask; `None` if none are.
    pub covered_metrics: Option<Metrics>,
    /// Fraction of all points covered by at least one mask.
    pub covered_fraction: f64,
}

/// Per-view-count outcome of one full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub labels: Vec<u32>,
    pub coverage: Vec<u32>,
}

/// Fits a rig, renders, builds proposals and segments for one view count.
pub fn run_pipeline(
    model: &Model,
    text: &TextEmbeddingSet,
    source: &dyn ProposalSource,
    views: usize,
    config: &AblationConfig,
) -> Result<PipelineRun> {
    if !(1..=MAX_VIEWS).contains(&views) {
        return Err(Error::InvalidArgument(format!("view count {views} outside [1, {MAX_VIEWS}]")));
    }
    let points = model.points();
    let rig = Rig(fit_rig_to_model(&points, views, config.intrinsics, config.elevation_deg)?);
    let renders = render_views(model, rig.poses(), config.splat_px)?;
    let bundle = source.bundle(&rig, &renders)?;
    let seg = Segmenter::from_bundle(&bundle, &renders, points.len(), config.min_pixels)?;
    let field = seg.segment(text, config.tau, config.normalization)?;
    let coverage = (0..points.len()).map(|p| seg.masks().coverage(p) as u32).collect();
    Ok(PipelineRun {
        labels: field.labels,
        coverage,
    })
}

/// Runs the pipeline once per view count with otherwise identical
/// settings. `gt` is indexed in `text` prompt order.
pub fn views_ablation(
    model: &Model,
    text: &TextEmbeddingSet,
    source: &dyn ProposalSource,
    gt: &[u32],
    config: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let k = text.len();
    if gt.len() != model.point_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} ground-truth labels for {} points",
            gt.len(),
            model.point_count()
        )));
    }
    config
        .view_counts
        .iter()
        .map(|&views| {
            let run = run_pipeline(model, text, source, views, config)?;
            let covered: Vec<bool> = run.coverage.iter().map(|&c| c > 0).collect();
            let cm = confusion(&run.labels, gt, k)?;
            let covered_cm = confusion_where(&run.labels, gt, k, Some(&covered))?;
            let covered_metrics = match metrics(&covered_cm, config.count_other_in_oa) {
                Ok(m) => Some(m),
                Err(Error::InvalidArgument(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AblationRow {
                views,
                metrics: metrics(&cm, config.count_other_in_oa)?,
                covered_metrics,
                covered_fraction: covered.iter().filter(|&&c| c).count() as f64 / covered.len().max(1) as f64,
            })
        })
        .collect()
}

/// `views,OA,mAcc,mIoU` with two decimals.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        writeln!(out, "{},{:.2},{:.2},{:.2}", r.views, m.oa, m.macc, m.miou).expect("string write");
    }
    out
}
