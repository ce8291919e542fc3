//! Mask fusion: classify mask embeddings against text embeddings by cosine
//! similarity, aggregate the class scores of all masks covering each point,
//! and threshold into labels with a reserved "other" class.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Rgb, Vec3};
use crate::io_util::{f32s_from_le, f32s_to_le, read_bytes, read_json, write_bytes, write_json};
use crate::proposal::{lift_all, stack_masks, BundleIndex, ProposalBundle, SparseMaskMatrix, DEFAULT_MIN_PIXELS};
use crate::render::RenderOutput;

pub const DEFAULT_TAU: f64 = 0.2;
pub const PROMPTS_FILE: &str = "prompts.json";
pub const TEXT_EMBEDDINGS_FILE: &str = "text_embeddings.f32";

/// `K x C` text embeddings with their prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet {
    prompts: Vec<String>,
    embeddings: Array2<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptsJson {
    prompts: Vec<String>,
    #[serde(rename = "C")]
    dim: usize,
}

impl TextEmbeddingSet {
    pub fn new(prompts: Vec<String>, embeddings: Array2<f64>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("at least one prompt is required".into()));
        }
        if prompts.len() != embeddings.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} prompts for {} embedding rows",
                prompts.len(),
                embeddings.nrows()
            )));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = prompts.iter().find(|p| !seen.insert(p.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate prompt `{dup}`")));
        }
        for (k, row) in embeddings.rows().into_iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) || row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "text embedding {k} (`{}`) is zero or non-finite",
                    prompts[k]
                )));
            }
        }
        Ok(Self { prompts, embeddings })
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    /// Number of classes `K`.
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Same classes in a different order: row `i` of the result is row
    /// `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let prompts = order.iter().map(|&i| self.prompts[i].clone()).collect();
        Self::new(prompts, self.embeddings.select(Axis(0), order))
    }

    /// Reads `prompts.json` and `text_embeddings.f32` from `dir`.
    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(PROMPTS_FILE);
        if !meta_path.exists() {
            return Err(Error::MissingInput(meta_path));
        }
        let meta: PromptsJson = read_json(&meta_path)?;
        let path = dir.join(TEXT_EMBEDDINGS_FILE);
        let bytes = read_bytes(&path)?;
        let expected = (meta.prompts.len() * meta.dim * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::EmbeddingSize {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let flat: Vec<f64> = f32s_from_le(&bytes)
            .expect("length checked")
            .into_iter()
            .map(f64::from)
            .collect();
        let k = meta.prompts.len();
        let m = Array2::from_shape_vec((k, meta.dim), flat)
            .map_err(|e| Error::Format(format!("text embeddings: {e}")))?;
        Self::new(meta.prompts, m)
    }

    /// Writes rows as little-endian f32, in prompt order.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(
            &dir.join(PROMPTS_FILE),
            &PromptsJson {
                prompts: self.prompts.clone(),
                dim: self.dim(),
            },
        )?;
        let flat: Vec<f32> = self.embeddings.iter().map(|&v| v as f32).collect();
        write_bytes(&dir.join(TEXT_EMBEDDINGS_FILE), &f32s_to_le(&flat))
    }
}

/// Raw `f32` embedding rows widened to an `N x dim` matrix.
pub fn embedding_matrix(rows: &[Vec<f32>], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), dim), |(i, c)| f64::from(rows[i][c]))
}

/// `N x K` cosine similarities between masks and classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(pub Array2<f64>);

impl LogitMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

fn unit_rows(m: ArrayView2<f64>, what: &str) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!("{what} row {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// `logits[n, k] = (Q_n · W_k) / (|Q_n| |W_k|)`, clamped to `[-1, 1]`.
pub fn classify(mask_embeddings: ArrayView2<f64>, text: &TextEmbeddingSet) -> Result<LogitMatrix> {
    if mask_embeddings.ncols() != text.dim() {
        return Err(Error::DimensionMismatch(format!(
            "mask embeddings have C = {}, text embeddings C = {}",
            mask_embeddings.ncols(),
            text.dim()
        )));
    }
    let q = unit_rows(mask_embeddings, "mask embedding")?;
    let w = unit_rows(text.embeddings(), "text embedding")?;
    Ok(classify_unit(q.view(), w.view()))
}

/// Cosine logits for inputs whose rows are already unit length.
fn classify_unit(q: ArrayView2<f64>, w: ArrayView2<f64>) -> LogitMatrix {
    let (n, k) = (q.nrows(), w.nrows());
    let mut out = Array2::zeros((n, k));
    if k == 0 {
        return LogitMatrix(out);
    }
    out.as_slice_mut()
        .expect("fresh array is contiguous")
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, dst)| {
            let qrow = q.row(i);
            for (d, wrow) in dst.iter_mut().zip(w.rows()) {
                let dot: f64 = qrow.iter().zip(wrow.iter()).map(|(a, b)| a * b).sum();
                *d = dot.clamp(-1.0, 1.0);
            }
        });
    LogitMatrix(out)
}

/// How fused scores are scaled per point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `Y = M P`.
    None,
    /// `Y = M P` with each row divided by its covering-mask count.
    #[default]
    Coverage,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "coverage" => Ok(Normalization::Coverage),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization `{other}` (expected none or coverage)"
            ))),
        }
    }
}

/// Per-point class scores and covering-mask counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScores {
    pub scores: Array2<f64>,
    pub coverage: Vec<u32>,
}

impl FusedScores {
    pub fn uncovered(&self) -> Vec<bool> {
        self.coverage.iter().map(|&c| c == 0).collect()
    }
}

/// Points per parallel work item in [`fuse`].
const FUSE_BLOCK_ROWS: usize = 256;

/// `Y[p, k] = Σ_n M[p, n] · logits[n, k]`, summed in ascending `n` so the
/// result does not depend on thread count.
pub fn fuse(masks: &SparseMaskMatrix, logits: &LogitMatrix, normalization: Normalization) -> Result<FusedScores> {
    let l = &logits.0;
    if l.nrows() != masks.cols() {
        return Err(Error::DimensionMismatch(format!(
            "mask matrix has {} columns, logits have {} rows",
            masks.cols(),
            l.nrows()
        )));
    }
    let k = l.ncols();
    let mut scores = Array2::zeros((masks.rows(), k));
    if k > 0 {
        let l = l.as_standard_layout();
        let l = l.as_slice().expect("standard layout is contiguous");
        scores
            .as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(k * FUSE_BLOCK_ROWS)
            .enumerate()
            .for_each(|(block, rows)| {
                for (i, row) in rows.chunks_exact_mut(k).enumerate() {
                    let covering = masks.row(block * FUSE_BLOCK_ROWS + i);
                    for &n in covering {
                        let src = &l[n as usize * k..(n as usize + 1) * k];
                        for (y, &v) in row.iter_mut().zip(src) {
                            *y += v;
                        }
                    }
                    if normalization == Normalization::Coverage && !covering.is_empty() {
                        let c = covering.len() as f64;
                        row.iter_mut().for_each(|y| *y /= c);
                    }
                }
            });
    }
    let coverage = (0..masks.rows()).map(|p| masks.coverage(p) as u32).collect();
    Ok(FusedScores { scores, coverage })
}

/// Per-point scores and labels; label `K` is "other".
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pub scores: Array2<f64>,
    pub labels: Vec<u32>,
    pub tau: f64,
}

impl LabelField {
    /// Number of real classes `K` (the "other" label).
    pub fn classes(&self) -> usize {
        self.scores.ncols()
    }

    pub fn other_label(&self) -> u32 {
        self.classes() as u32
    }
}

/// Label = first argmax of the score row, or "other" when the row maximum
/// is below `tau` or the point is uncovered.
pub fn assign_labels(scores: Array2<f64>, tau: f64, uncovered: &[bool]) -> Result<LabelField> {
    if !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau {tau} is not finite")));
    }
    if uncovered.len() != scores.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} uncovered flags for {} points",
            uncovered.len(),
            scores.nrows()
        )));
    }
    let other = scores.ncols() as u32;
    let labels = (0..scores.nrows())
        .into_par_iter()
        .map(|p| {
            let row = scores.row(p);
            if uncovered[p] {
                return other;
            }
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            match row.get(best) {
                Some(&max) if max >= tau => best as u32,
                _ => other,
            }
        })
        .collect();
    Ok(LabelField { scores, labels, tau })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentConfig {
    pub tau: f64,
    pub normalization: Normalization,
    pub min_pixels: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            normalization: Normalization::Coverage,
            min_pixels: DEFAULT_MIN_PIXELS,
        }
    }
}

/// Wall time of the prompt-dependent stages.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SegmentTiming {
    pub classify: Duration,
    pub fuse: Duration,
    pub assign: Duration,
}

/// Lifted mask matrix `M` and unit mask embeddings `Q` for one model and
/// bundle. Both depend only on the bundle, so one `Segmenter` answers any
/// number of prompt sets.
#[derive(Debug, Clone)]
pub struct Segmenter {
    masks: SparseMaskMatrix,
    mask_embeddings: Array2<f64>,
}

impl Segmenter {
    /// `mask_embeddings` row `n` belongs to column `n` of `masks`; rows
    /// need not be normalized. Rows are normalized here and only here, so
    /// segmenters built from the same raw rows agree bit for bit.
    pub fn new(masks: SparseMaskMatrix, mask_embeddings: Array2<f64>) -> Result<Self> {
        if mask_embeddings.nrows() != masks.cols() {
            return Err(Error::DimensionMismatch(format!(
                "{} mask embeddings for {} masks",
                mask_embeddings.nrows(),
                masks.cols()
            )));
        }
        let mask_embeddings = unit_rows(mask_embeddings.view(), "mask embedding")?;
        Ok(Self {
            masks,
            mask_embeddings,
        })
    }

    /// Lifts every bundle mask against `renders` and stacks the survivors.
    pub fn from_bundle(
        bundle: &ProposalBundle,
        renders: &[RenderOutput],
        point_count: usize,
        min_pixels: usize,
    ) -> Result<Self> {
        for pose in bundle.rig().poses() {
            if !renders.iter().any(|r| r.view_index == pose.view_index) {
                return Err(Error::InvalidArgument(format!(
                    "no render for bundle view {}",
                    pose.view_index
                )));
            }
        }
        let lifted = lift_all(bundle.masks(), renders, point_count, min_pixels)?;
        let matrix = stack_masks(&lifted.masks, point_count)?;
        let kept: Vec<Vec<f32>> = lifted
            .source_rows
            .iter()
            .map(|&n| bundle.embeddings()[n].clone())
            .collect();
        Self::new(matrix, embedding_matrix(&kept, bundle.embedding_dim()))
    }

    /// Pairs a cached mask matrix with the bundle embeddings named by its
    /// provenance. Reads no mask files.
    pub fn from_cached(masks: SparseMaskMatrix, index: &BundleIndex) -> Result<Self> {
        let rows: HashMap<(u32, u32), usize> =
            index.mask_refs().into_iter().enumerate().map(|(n, r)| (r, n)).collect();
        let kept = masks
            .provenance()
            .iter()
            .map(|r| {
                rows.get(r).map(|&n| index.embeddings()[n].clone()).ok_or_else(|| {
                    Error::Format(format!("cached mask {}/{} is not in the bundle", r.0, r.1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(masks, embedding_matrix(&kept, index.embedding_dim()))
    }

    pub fn masks(&self) -> &SparseMaskMatrix {
        &self.masks
    }

    pub fn mask_embeddings(&self) -> ArrayView2<'_, f64> {
        self.mask_embeddings.view()
    }

    pub fn point_count(&self) -> usize {
        self.masks.rows()
    }

    pub fn segment(&self, text: &TextEmbeddingSet, tau: f64, normalization: Normalization) -> Result<LabelField> {
        self.segment_timed(text, tau, normalization).map(|(l, _)| l)
    }

    pub fn segment_timed(
        &self,
        text: &TextEmbeddingSet,
        tau: f64,
        normalization: Normalization,
    ) -> Result<(LabelField, SegmentTiming)> {
        if text.dim() != self.mask_embeddings.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "text embeddings have C = {}, mask embeddings C = {}",
                text.dim(),
                self.mask_embeddings.ncols()
            )));
        }
        let t0 = Instant::now();
        let w = unit_rows(text.embeddings(), "text embedding")?;
        let logits = classify_unit(self.mask_embeddings.view(), w.view());
        let t1 = Instant::now();
        let fused = fuse(&self.masks, &logits, normalization)?;
        let t2 = Instant::now();
        let uncovered = fused.uncovered();
        let labels = assign_labels(fused.scores, tau, &uncovered)?;
        let t3 = Instant::now();
        Ok((
            labels,
            SegmentTiming {
                classify: t1 - t0,
                fuse: t2 - t1,
                assign: t3 - t2,
            },
        ))
    }
}

/// One-shot segmentation: lift, stack, classify, fuse and threshold.
pub fn segment(
    bundle: &ProposalBundle,
    renders: &[RenderOutput],
    point_count: usize,
    text: &TextEmbeddingSet,
    config: &SegmentConfig,
) -> Result<LabelField> {
    Segmenter::from_bundle(bundle, renders, point_count, config.min_pixels)?.segment(
        text,
        config.tau,
        config.normalization,
    )
}

/// Relabels uncovered points by majority vote over the labels of their `k`
/// nearest covered points (ties to the lower label). Off by default.
pub fn inpaint_knn(field: &mut LabelField, coverage: &[u32], positions: &[Vec3], k: usize) -> Result<()> {
    if coverage.len() != field.labels.len() || positions.len() != field.labels.len() {
        return Err(Error::DimensionMismatch("inpaint inputs differ in length".into()));
    }
    let covered: Vec<usize> = (0..coverage.len()).filter(|&i| coverage[i] > 0).collect();
    if covered.is_empty() || k == 0 {
        return Ok(());
    }
    let classes = field.classes() + 1;
    let labels = &field.labels;
    let updates: Vec<(usize, u32)> = (0..coverage.len())
        .into_par_iter()
        .filter(|&i| coverage[i] == 0)
        .map(|i| {
            let mut near: Vec<(f64, usize)> = covered
                .iter()
                .map(|&j| ((positions[j] - positions[i]).norm_squared(), j))
                .collect();
            let kk = k.min(near.len());
            near.select_nth_unstable_by(kk - 1, |a, b| a.partial_cmp(b).expect("finite"));
            let mut votes = vec![0usize; classes];
            for &(_, j) in &near[..kk] {
                votes[labels[j] as usize] += 1;
            }
            let best = (0..classes).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
            (i, best as u32)
        })
        .collect();
    for (i, l) in updates {
        field.labels[i] = l;
    }
    Ok(())
}

/// `k` distinct, deterministic class colors (evenly spaced hues).
pub fn class_palette(k: usize) -> Vec<Rgb> {
    (0..k)
        .map(|i| {
            let h = i as f32 / k.max(1) as f32 * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [0.15 + 0.75 * r, 0.15 + 0.75 * g, 0.15 + 0.75 * b]
        })
        .collect()
}

/// `labels.json`: threshold, prompts and one label per point (`K` = other).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsJson {
    pub tau: f64,
    pub prompts: Vec<String>,
    pub labels: Vec<u32>,
    /// Number of views the labels were produced from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<usize>,
    /// Covering-mask count per point, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Vec<u32>>,
}

impl LabelsJson {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
