//! Seeded workloads shared by the benchmarks.

use mf3d_core::camera::{fit_rig_to_model, Intrinsics};
use mf3d_core::{PointSet, Rig, SparseMaskMatrix, TextEmbeddingSet, Vec3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Near-uniform points on a sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            Vec3::new(r * t.cos(), y, r * t.sin()) * radius
        })
        .collect()
}

/// Ring rig with default intrinsics fitted around `points`.
pub fn ring(points: &PointSet, views: usize) -> Rig {
    Rig(fit_rig_to_model(points, views, Intrinsics::default(), 0.0).expect("valid rig"))
}

/// `n` masks over `p` points, each a random cap of about `p / 40` points
/// around a random center on a Fibonacci sphere.
pub fn cap_masks(p: usize, n: usize, seed: u64) -> SparseMaskMatrix {
    let pts = fibonacci_sphere(p, 1.0);
    let mut r = rng(seed);
    // Cap of area fraction f has cos(angle) = 1 - 2f.
    let min_dot = 1.0 - 2.0 / 40.0;
    let columns: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let c = pts[r.gen_range(0..p)];
            (0..p as u32).filter(|&i| pts[i as usize].dot(&c) >= min_dot).collect()
        })
        .collect();
    let refs: Vec<&[u32]> = columns.iter().map(Vec::as_slice).collect();
    let provenance = (0..n as u32).map(|j| (j / 50 + 1, j % 50)).collect();
    SparseMaskMatrix::from_columns(p, &refs, provenance).expect("valid masks")
}

/// Uniform entries in [-1, 1).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
}

pub fn random_text(k: usize, dim: usize, seed: u64) -> TextEmbeddingSet {
    TextEmbeddingSet::new((0..k).map(|i| format!("class {i}")).collect(), random_matrix(k, dim, seed))
        .expect("valid prompts")
}

/// Points on a unit sphere plus `outliers` uniform points in a 4 m cube.
pub fn noisy_cloud(p: usize, outliers: usize, seed: u64) -> PointSet {
    let mut r = rng(seed);
    let mut pts = fibonacci_sphere(p, 1.0);
    pts.extend((0..outliers).map(|_| Vec3::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0))));
    PointSet::new(pts).expect("finite points")
}
