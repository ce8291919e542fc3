//! The proposal bundle directory:
//!
//! ```text
//! bundle/
//!   manifest.json            cameras, per-view mask lists, embedding dim, checksums
//!   masks/view{i}_mask{j}.rle
//!   embeddings.f32           N x C little-endian f32, manifest mask order
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{decode_rle, encode_rle, Mask2D};
use crate::camera::{Rig, RigJson};
use crate::error::{Error, Result};
use crate::io_util::{f32s_from_le, f32s_to_le, read_bytes, sha256_hex, write_bytes};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleSource {
    /// Produced by pretrained mask and embedding models.
    Model,
    /// Produced from ground truth by the fixture generator.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub source: BundleSource,
    /// Embedding dimension C.
    pub embedding_dim: usize,
    pub cameras: RigJson,
    pub views: Vec<ManifestView>,
    pub embeddings: ManifestEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub index: u32,
    pub width: u32,
    pub height: u32,
    pub masks: Vec<ManifestMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMask {
    pub id: u32,
    /// Path relative to the bundle root.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEmbeddings {
    pub file: String,
    pub sha256: String,
}

/// Masks and their embeddings for every view of a rig.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBundle {
    rig: Rig,
    masks: Vec<Mask2D>,
    embeddings: Vec<Vec<f32>>,
    embedding_dim: usize,
    source: BundleSource,
}

impl ProposalBundle {
    /// Masks are kept in view order then given order; `embeddings[n]`
    /// belongs to `masks[n]`.
    pub fn new(
        rig: Rig,
        mut masks: Vec<Mask2D>,
        embeddings: Vec<Vec<f32>>,
        embedding_dim: usize,
        source: BundleSource,
    ) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::EmptyBundle);
        }
        if masks.len() != embeddings.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} masks but {} embeddings",
                masks.len(),
                embeddings.len()
            )));
        }
        if embedding_dim == 0 {
            return Err(Error::Format("embedding dimension is zero".into()));
        }
        let mut seen = BTreeSet::new();
        for (m, e) in masks.iter().zip(&embeddings) {
            let pose = rig.pose(m.view_index).ok_or_else(|| {
                Error::Format(format!("mask {} refers to unknown view {}", m.mask_id, m.view_index))
            })?;
            if (pose.intrinsics.width, pose.intrinsics.height) != (m.width(), m.height()) {
                return Err(Error::DimensionMismatch(format!(
                    "mask {}/{} is {}x{}, view is {}x{}",
                    m.view_index,
                    m.mask_id,
                    m.width(),
                    m.height(),
                    pose.intrinsics.width,
                    pose.intrinsics.height
                )));
            }
            if !seen.insert((m.view_index, m.mask_id)) {
                return Err(Error::Format(format!(
                    "duplicate mask id {} in view {}",
                    m.mask_id, m.view_index
                )));
            }
            check_embedding(e, embedding_dim, m)?;
        }
        // Stable sort by view position in the rig keeps per-view order.
        let order: Vec<u32> = rig.poses().iter().map(|p| p.view_index).collect();
        let rank = |v: u32| order.iter().position(|&o| o == v).expect("checked above");
        let mut paired: Vec<(Mask2D, Vec<f32>)> = masks.drain(..).zip(embeddings).collect();
        paired.sort_by_key(|(m, _)| rank(m.view_index));
        let (masks, embeddings) = paired.into_iter().unzip();
        Ok(Self {
            rig,
            masks,
            embeddings,
            embedding_dim,
            source,
        })
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn masks(&self) -> &[Mask2D] {
        &self.masks
    }

    pub fn embeddings(&self) -> &[Vec<f32>] {
        &self.embeddings
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn source(&self) -> BundleSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Embeddings as an `N x C` matrix of unit rows.
    pub fn unit_embeddings(&self) -> Array2<f64> {
        unit_rows(&self.embeddings, self.embedding_dim)
    }
}

fn check_embedding(e: &[f32], dim: usize, m: &Mask2D) -> Result<()> {
    if e.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "embedding of mask {}/{} has {} entries, expected {dim}",
            m.view_index,
            m.mask_id,
            e.len()
        )));
    }
    if !e.iter().all(|v| v.is_finite()) {
        return Err(Error::Format(format!(
            "embedding of mask {}/{} is not finite",
            m.view_index, m.mask_id
        )));
    }
    if e.iter().all(|&v| v == 0.0) {
        return Err(Error::Format(format!(
            "embedding of mask {}/{} has zero norm",
            m.view_index, m.mask_id
        )));
    }
    Ok(())
}

pub(crate) fn unit_rows(rows: &[Vec<f32>], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        let norm = src.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = f64::from(s) / norm;
        }
    }
    out
}

fn mask_file(view: u32, id: u32) -> String {
    format!("masks/view{view}_mask{id}.rle")
}

/// Writes `bundle` into directory `dir` (created if needed).
pub fn write_bundle(bundle: &ProposalBundle, dir: &Path) -> Result<()> {
    let mut views: Vec<ManifestView> = bundle
        .rig
        .poses()
        .iter()
        .map(|p| ManifestView {
            index: p.view_index,
            width: p.intrinsics.width,
            height: p.intrinsics.height,
            masks: Vec::new(),
        })
        .collect();
    for m in &bundle.masks {
        let bytes = encode_rle(m.bits());
        let file = mask_file(m.view_index, m.mask_id);
        write_bytes(&dir.join(&file), &bytes)?;
        let view = views
            .iter_mut()
            .find(|v| v.index == m.view_index)
            .expect("bundle masks reference rig views");
        view.masks.push(ManifestMask {
            id: m.mask_id,
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let flat: Vec<f32> = bundle.embeddings.iter().flatten().copied().collect();
    let emb_bytes = f32s_to_le(&flat);
    write_bytes(&dir.join(EMBEDDINGS_FILE), &emb_bytes)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        source: bundle.source,
        embedding_dim: bundle.embedding_dim,
        cameras: bundle.rig.to_json(),
        views,
        embeddings: ManifestEmbeddings {
            file: EMBEDDINGS_FILE.into(),
            sha256: sha256_hex(&emb_bytes),
        },
    };
    crate::io_util::write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// A bundle whose manifest and embeddings are loaded but whose mask files
/// have not been read yet.
#[derive(Debug, Clone)]
pub struct BundleIndex {
    root: PathBuf,
    manifest: Manifest,
    manifest_bytes: Vec<u8>,
    rig: Rig,
    embeddings: Vec<Vec<f32>>,
}

impl BundleIndex {
    /// Reads and validates the manifest and the embedding file.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingInput(manifest_path));
        }
        let manifest_bytes = read_bytes(&manifest_path)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported bundle schema version {} (supported: {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let rig = Rig::from_json(&manifest.cameras)?;
        let n: usize = manifest.views.iter().map(|v| v.masks.len()).sum();
        if n == 0 {
            return Err(Error::EmptyBundle);
        }
        let c = manifest.embedding_dim;
        if c == 0 {
            return Err(Error::Format("embedding dimension is zero".into()));
        }
        for v in &manifest.views {
            let pose = rig
                .pose(v.index)
                .ok_or_else(|| Error::Format(format!("view {} has no camera", v.index)))?;
            if (pose.intrinsics.width, pose.intrinsics.height) != (v.width, v.height) {
                return Err(Error::DimensionMismatch(format!(
                    "view {} is listed as {}x{} but its camera is {}x{}",
                    v.index, v.width, v.height, pose.intrinsics.width, pose.intrinsics.height
                )));
            }
        }

        let emb_path = dir.join(&manifest.embeddings.file);
        let emb_bytes = read_bytes(&emb_path)?;
        verify(&manifest.embeddings.file, &manifest.embeddings.sha256, &emb_bytes)?;
        let expected = (n * c * 4) as u64;
        if emb_bytes.len() as u64 != expected {
            return Err(Error::EmbeddingSize {
                expected,
                actual: emb_bytes.len() as u64,
            });
        }
        let flat = f32s_from_le(&emb_bytes).expect("length checked");
        let embeddings: Vec<Vec<f32>> = flat.chunks_exact(c).map(<[f32]>::to_vec).collect();
        let mut pos = 0;
        for v in &manifest.views {
            for m in &v.masks {
                let e = &embeddings[pos];
                if !e.iter().all(|x| x.is_finite()) || e.iter().all(|&x| x == 0.0) {
                    return Err(Error::Format(format!(
                        "embedding of mask {}/{} is zero or non-finite",
                        v.index, m.id
                    )));
                }
                pos += 1;
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            manifest_bytes,
            rig,
            embeddings,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Raw `manifest.json` bytes, as hashed for cache keys.
    pub fn manifest_bytes(&self) -> &[u8] {
        &self.manifest_bytes
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    /// Key of the mask-matrix cache entry for this bundle.
    pub fn cache_key(&self) -> [u8; 32] {
        super::cache_key(&self.manifest_bytes, &self.rig.to_json_bytes())
    }

    pub fn embedding_dim(&self) -> usize {
        self.manifest.embedding_dim
    }

    pub fn embeddings(&self) -> &[Vec<f32>] {
        &self.embeddings
    }

    /// `(view_index, mask_id)` for every mask, in manifest order.
    pub fn mask_refs(&self) -> Vec<(u32, u32)> {
        self.manifest
            .views
            .iter()
            .flat_map(|v| v.masks.iter().map(move |m| (v.index, m.id)))
            .collect()
    }

    /// Reads and checksums every mask file.
    pub fn load_masks(&self) -> Result<Vec<Mask2D>> {
        let mut out = Vec::new();
        for v in &self.manifest.views {
            for m in &v.masks {
                let bytes = read_bytes(&self.root.join(&m.file))?;
                verify(&m.file, &m.sha256, &bytes)?;
                let bits = decode_rle(&bytes, v.width as usize * v.height as usize)?;
                out.push(Mask2D::new(v.index, m.id, v.width, v.height, bits)?);
            }
        }
        Ok(out)
    }

    pub fn into_bundle(self) -> Result<ProposalBundle> {
        let masks = self.load_masks()?;
        ProposalBundle::new(
            self.rig,
            masks,
            self.embeddings,
            self.manifest.embedding_dim,
            self.manifest.source,
        )
    }
}

fn verify(file: &str, expected: &str, bytes: &[u8]) -> Result<()> {
    let actual = sha256_hex(bytes);
    if !actual.eq_ignore_ascii_case(expected) {
        return Err(Error::Checksum {
            file: file.to_string(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<ProposalBundle> {
    BundleIndex::open(dir)?.into_bundle()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_ring_rig, Intrinsics, RingSpec};
    use crate::geom::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig(views: usize) -> Rig {
        let k = Intrinsics::centered(20.0, 24, 16).unwrap();
        Rig(make_ring_rig(
            &RingSpec {
                views,
                center: Vec3::zeros(),
                radius: 3.0,
                up: Vec3::y(),
                elevation_deg: 0.0,
            },
            k,
        )
        .unwrap())
    }

    fn random_bundle(seed: u64, n: usize) -> ProposalBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = rig(3);
        let mut masks = Vec::new();
        let mut emb = Vec::new();
        for j in 0..n {
            let view = rng.gen_range(1..=3);
            let mask = Mask2D::from_fn(view, j as u32, 24, 16, |x, y| {
                (x + y) % 7 == 0 || rng.gen_bool(0.3)
            })
            .unwrap();
            masks.push(mask);
            emb.push((0..5).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        }
        ProposalBundle::new(rig, masks, emb, 5, BundleSource::Synthetic).unwrap()
    }

    #[test]
    fn write_read_identity() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(3, 5);
        write_bundle(&b, dir.path()).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn views_without_masks_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let r = rig(3);
        let m = Mask2D::from_fn(2, 0, 24, 16, |x, _| x < 3).unwrap();
        let b = ProposalBundle::new(r, vec![m], vec![vec![1.0, 0.0]], 2, BundleSource::Model).unwrap();
        write_bundle(&b, dir.path()).unwrap();
        let idx = BundleIndex::open(dir.path()).unwrap();
        let counts: Vec<usize> = idx.manifest().views.iter().map(|v| v.masks.len()).collect();
        assert_eq!(counts, vec![0, 1, 0]);
    }

    #[test]
    fn empty_bundle_is_rejected() {
        assert!(matches!(
            ProposalBundle::new(rig(2), vec![], vec![], 4, BundleSource::Synthetic),
            Err(Error::EmptyBundle)
        ));
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(1, 1);
        write_bundle(&b, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        for v in &mut m.views {
            v.masks.clear();
        }
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::EmptyBundle)));
    }

    #[test]
    fn embedding_size_mismatch_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(2, 4);
        write_bundle(&b, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        let emb = dir.path().join(EMBEDDINGS_FILE);
        let mut bytes = std::fs::read(&emb).unwrap();
        bytes.extend_from_slice(&[0; 4]);
        std::fs::write(&emb, &bytes).unwrap();
        m.embeddings.sha256 = sha256_hex(&bytes);
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        match read_bundle(dir.path()) {
            Err(Error::EmbeddingSize { expected, actual }) => {
                assert_eq!(expected, 4 * 5 * 4);
                assert_eq!(actual, 4 * 5 * 4 + 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tampered_files_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bundle(4, 2);
        write_bundle(&b, dir.path()).unwrap();
        let emb = dir.path().join(EMBEDDINGS_FILE);
        let mut bytes = std::fs::read(&emb).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&emb, &bytes).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn zero_embedding_is_rejected() {
        let m = Mask2D::from_fn(1, 0, 24, 16, |x, _| x == 0).unwrap();
        assert!(ProposalBundle::new(rig(1), vec![m], vec![vec![0.0; 3]], 3, BundleSource::Model).is_err());
    }

    #[test]
    fn unsupported_schema_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&random_bundle(5, 1), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        m.schema_version = 2;
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::Format(_))));
    }
}
