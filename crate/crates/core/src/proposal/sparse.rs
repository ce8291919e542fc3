//! The stacked `P x N` binary mask matrix and its on-disk cache form.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::Mask3D;
use crate::error::{Error, Result};
use crate::io_util::{read_bytes, write_bytes};

/// Binary `P x N` matrix: column `n` is the membership of 3D mask `n`.
///
/// Stored column-compressed, with a row-compressed copy for per-point
/// traversal. Row entries are in ascending column order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMaskMatrix {
    rows: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    provenance: Vec<(u32, u32)>,
}

impl SparseMaskMatrix {
    /// `columns[n]` must be sorted, unique and below `rows`.
    pub fn from_columns(rows: usize, columns: &[&[u32]], provenance: Vec<(u32, u32)>) -> Result<Self> {
        if provenance.len() != columns.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} provenance entries for {} columns",
                provenance.len(),
                columns.len()
            )));
        }
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut row_counts = vec![0usize; rows];
        for (n, col) in columns.iter().enumerate() {
            if col.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "column {n} is not strictly increasing"
                )));
            }
            if col.last().is_some_and(|&r| r as usize >= rows) {
                return Err(Error::DimensionMismatch(format!(
                    "column {n} has a row beyond {rows}"
                )));
            }
            for &r in *col {
                row_counts[r as usize] += 1;
            }
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }

        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        for c in &row_counts {
            row_ptr.push(row_ptr.last().expect("nonempty") + c);
        }
        let mut fill = row_ptr[..rows].to_vec();
        let mut col_idx = vec![0u32; row_idx.len()];
        // Visiting columns in ascending order fills each row ascending.
        for n in 0..columns.len() {
            for &r in &row_idx[col_ptr[n]..col_ptr[n + 1]] {
                col_idx[fill[r as usize]] = n as u32;
                fill[r as usize] += 1;
            }
        }
        Ok(Self {
            rows,
            col_ptr,
            row_idx,
            row_ptr,
            col_idx,
            provenance,
        })
    }

    /// Number of points `P`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of masks `N`.
    pub fn cols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Sorted member points of mask `n`.
    pub fn column(&self, n: usize) -> &[u32] {
        &self.row_idx[self.col_ptr[n]..self.col_ptr[n + 1]]
    }

    /// Masks covering point `p`, ascending.
    pub fn row(&self, p: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[p]..self.row_ptr[p + 1]]
    }

    /// Number of masks covering point `p`.
    pub fn coverage(&self, p: usize) -> usize {
        self.row_ptr[p + 1] - self.row_ptr[p]
    }

    /// `(view_index, mask_id)` of each column.
    pub fn provenance(&self) -> &[(u32, u32)] {
        &self.provenance
    }

    /// Row-major dense 0/1 matrix.
    pub fn densify(&self) -> Vec<Vec<u8>> {
        let mut d = vec![vec![0u8; self.cols()]; self.rows];
        for n in 0..self.cols() {
            for &r in self.column(n) {
                d[r as usize][n] = 1;
            }
        }
        d
    }
}

/// Stacks lifted masks as the columns of `M`.
pub fn stack_masks(masks: &[Mask3D], point_count: usize) -> Result<SparseMaskMatrix> {
    if let Some(m) = masks.iter().find(|m| m.point_count() != point_count) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}/{} spans {} points, expected {point_count}",
            m.view_index,
            m.mask_id,
            m.point_count()
        )));
    }
    let cols: Vec<&[u32]> = masks.iter().map(Mask3D::members).collect();
    let prov = masks.iter().map(|m| (m.view_index, m.mask_id)).collect();
    SparseMaskMatrix::from_columns(point_count, &cols, prov)
}

/// `sha256(manifest) XOR sha256(rig)`.
pub fn cache_key(manifest_bytes: &[u8], rig_bytes: &[u8]) -> [u8; 32] {
    let a = Sha256::digest(manifest_bytes);
    let b = Sha256::digest(rig_bytes);
    std::array::from_fn(|i| a[i] ^ b[i])
}

const CACHE_MAGIC: &[u8; 4] = b"MSKC";
const CACHE_VERSION: u32 = 1;

/// Contents of a mask-matrix cache file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskCache {
    pub key: [u8; 32],
    pub min_pixels: u32,
    pub matrix: SparseMaskMatrix,
}

/// Layout (little-endian): magic `MSKC`, u32 version, u64 P, u64 N, u64 nnz,
/// u32 min_pixels, 32-byte key, (N+1) x u64 column pointers, nnz x u32 row
/// indices, N x (u32 view, u32 mask id), then the sha256 of all preceding bytes.
pub fn encode_mask_cache(cache: &MaskCache) -> Vec<u8> {
    let m = &cache.matrix;
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    out.extend_from_slice(&(m.nnz() as u64).to_le_bytes());
    out.extend_from_slice(&cache.min_pixels.to_le_bytes());
    out.extend_from_slice(&cache.key);
    for &p in &m.col_ptr {
        out.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for &r in &m.row_idx {
        out.extend_from_slice(&r.to_le_bytes());
    }
    for &(v, id) in &m.provenance {
        out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(&id.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_mask_cache(bytes: &[u8]) -> Result<MaskCache> {
    let corrupt = |what: &str| Error::Format(format!("mask cache: {what}"));
    if bytes.len() < 32 + 36 + 32 || &bytes[..4] != CACHE_MAGIC {
        return Err(corrupt("bad header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let actual = Sha256::digest(body);
    if actual.as_slice() != digest {
        return Err(Error::Checksum {
            file: "mask cache".into(),
            expected: hex::encode(digest),
            actual: hex::encode(actual),
        });
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
        pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    if u32_at(take(4)?) != CACHE_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let rows = u64_at(take(8)?) as usize;
    let cols = u64_at(take(8)?) as usize;
    let nnz = u64_at(take(8)?) as usize;
    let min_pixels = u32_at(take(4)?);
    let key: [u8; 32] = take(32)?.try_into().expect("32 bytes");
    let col_ptr: Vec<usize> = take((cols + 1) * 8)?
        .chunks_exact(8)
        .map(|c| u64_at(c) as usize)
        .collect();
    let row_idx: Vec<u32> = take(nnz * 4)?.chunks_exact(4).map(u32_at).collect();
    let provenance: Vec<(u32, u32)> = take(cols * 8)?
        .chunks_exact(8)
        .map(|c| (u32_at(&c[..4]), u32_at(&c[4..])))
        .collect();
    if col_ptr.first() != Some(&0)
        || col_ptr.last() != Some(&nnz)
        || col_ptr.windows(2).any(|w| w[0] > w[1])
    {
        return Err(corrupt("inconsistent column pointers"));
    }
    let columns: Vec<&[u32]> = col_ptr.windows(2).map(|w| &row_idx[w[0]..w[1]]).collect();
    let matrix = SparseMaskMatrix::from_columns(rows, &columns, provenance)?;
    Ok(MaskCache {
        key,
        min_pixels,
        matrix,
    })
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial cache.
pub fn write_mask_cache(path: &Path, cache: &MaskCache) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    write_bytes(&tmp, &encode_mask_cache(cache))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_mask_cache(path: &Path) -> Result<MaskCache> {
    decode_mask_cache(&read_bytes(path)?)
}
