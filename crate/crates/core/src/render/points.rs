//! Disc splatting of point sets.

use rayon::prelude::*;

use super::{
    assemble_bands, band_count, RenderOutput, BAND_ROWS, DEFAULT_COLOR, DEPTH_TIE_EPS,
};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geom::{rgb_to_u8, PointSet};

/// Splat radius in pixels: 2 for clouds of 50k points or more, growing as
/// `sqrt(50000 / P)` for sparser clouds, clamped to `[1, 6]`.
pub fn default_splat_radius(point_count: usize) -> f64 {
    if point_count >= 50_000 {
        return 2.0;
    }
    (2.0 * (50_000.0 / point_count.max(1) as f64).sqrt()).clamp(1.0, 6.0)
}

struct Splat {
    index: u32,
    u: f64,
    v: f64,
    z: f64,
    y_range: (u32, u32),
}

/// Splats every point as a disc of radius `splat_px` (pixel centers within
/// the closed disc). The nearest point wins a pixel; depth ties within
/// `1e-7` go to the lower point index. Depth is constant over a disc.
pub fn rasterize_points(points: &PointSet, pose: &CameraPose, splat_px: f64) -> Result<RenderOutput> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot splat an empty point set".into()));
    }
    if !(splat_px >= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "splat radius {splat_px} px is below 0.5"
        )));
    }
    pose.intrinsics.validate()?;
    let (width, height) = (pose.intrinsics.width, pose.intrinsics.height);
    let r2 = splat_px * splat_px;

    let splats: Vec<Splat> = points
        .positions()
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let q = pose.project(p)?;
            // Pixel rows whose centers y + 0.5 fall within the disc's extent.
            let lo = (q.v - splat_px - 0.5).ceil();
            let hi = (q.v + splat_px - 0.5).floor();
            if hi < 0.0 || lo > f64::from(height - 1) {
                return None;
            }
            Some(Splat {
                index: i as u32,
                u: q.u,
                v: q.v,
                z: q.z,
                y_range: (lo.max(0.0) as u32, hi.min(f64::from(height - 1)) as u32),
            })
        })
        .collect();

    let n_bands = band_count(height);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bands];
    for (si, s) in splats.iter().enumerate() {
        let (b0, b1) = (s.y_range.0 as usize / BAND_ROWS, s.y_range.1 as usize / BAND_ROWS);
        for bin in &mut bins[b0..=b1] {
            bin.push(si);
        }
    }

    let colors = points.colors();
    let bands: Vec<RenderOutput> = bins
        .par_iter()
        .enumerate()
        .map(|(band, bin)| {
            let row0 = (band * BAND_ROWS) as u32;
            let rows = (height - row0).min(BAND_ROWS as u32);
            let mut out = RenderOutput::background(width, rows, pose.view_index);
            let mut zbuf = vec![f64::INFINITY; width as usize * rows as usize];
            for &si in bin {
                let s = &splats[si];
                let rgb = rgb_to_u8(colors.map_or(DEFAULT_COLOR, |c| c[s.index as usize]));
                let x_lo = (s.u - splat_px - 0.5).ceil().max(0.0);
                let x_hi = (s.u + splat_px - 0.5).floor().min(f64::from(width) - 1.0);
                if x_lo > x_hi {
                    continue;
                }
                for y in s.y_range.0.max(row0)..=s.y_range.1.min(row0 + rows - 1) {
                    let dy = f64::from(y) + 0.5 - s.v;
                    for x in x_lo as u32..=x_hi as u32 {
                        let dx = f64::from(x) + 0.5 - s.u;
                        if dx * dx + dy * dy > r2 {
                            continue;
                        }
                        let slot = (y - row0) as usize * width as usize + x as usize;
                        if !(s.z < zbuf[slot] - DEPTH_TIE_EPS) {
                            continue;
                        }
                        zbuf[slot] = s.z;
                        out.point_index[slot] = s.index as i32;
                        out.depth[slot] = s.z as f32;
                        out.rgb[slot * 3..slot * 3 + 3].copy_from_slice(&rgb);
                    }
                }
            }
            out
        })
        .collect();

    Ok(assemble_bands(width, height, pose.view_index, bands))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::geom::{RigidTransform, Vec3};
    use crate::render::{visible_points, SENTINEL};

    fn pose() -> CameraPose {
        CameraPose {
            intrinsics: Intrinsics::centered(64.0, 64, 64).unwrap(),
            world_to_cam: RigidTransform::identity(),
            view_index: 3,
        }
    }

    #[test]
    fn single_point_makes_a_disc() {
        let p = PointSet::new(vec![Vec3::new(0.0, 0.0, 2.0)]).unwrap();
        let out = rasterize_points(&p, &pose(), 3.0).unwrap();
        out.validate(1).unwrap();
        let hits: Vec<usize> = (0..out.point_index.len())
            .filter(|&i| out.point_index[i] != SENTINEL)
            .collect();
        // Centers within radius 3 of (32, 32).
        let expected = (0..64 * 64)
            .filter(|i| {
                let (x, y) = ((i % 64) as f64 + 0.5, (i / 64) as f64 + 0.5);
                (x - 32.0).powi(2) + (y - 32.0).powi(2) <= 9.0
            })
            .count();
        assert_eq!(hits.len(), expected);
        assert!(hits.iter().all(|&i| out.point_index[i] == 0 && out.depth[i] == 2.0));
        assert_eq!(visible_points(&out), vec![0]);
        assert_eq!(out.view_index, 3);
    }

    #[test]
    fn nearer_point_wins() {
        let far_first = PointSet::new(vec![Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 2.0)]).unwrap();
        let out = rasterize_points(&far_first, &pose(), 2.0).unwrap();
        assert_eq!(out.point_index[32 * 64 + 32], 1);
        let tie = PointSet::new(vec![Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, 2.0)]).unwrap();
        let out = rasterize_points(&tie, &pose(), 2.0).unwrap();
        assert_eq!(out.point_index[32 * 64 + 32], 0);
    }

    #[test]
    fn behind_camera_is_skipped() {
        let p = PointSet::new(vec![Vec3::new(0.0, 0.0, -2.0)]).unwrap();
        let out = rasterize_points(&p, &pose(), 2.0).unwrap();
        assert!(visible_points(&out).is_empty());
    }

    #[test]
    fn splat_defaults() {
        assert_eq!(default_splat_radius(50_000), 2.0);
        assert_eq!(default_splat_radius(1_000_000), 2.0);
        assert!((default_splat_radius(12_500) - 4.0).abs() < 1e-12);
        assert_eq!(default_splat_radius(10), 6.0);
    }

    #[test]
    fn rejects_tiny_radius() {
        let p = PointSet::new(vec![Vec3::new(0.0, 0.0, 2.0)]).unwrap();
        assert!(rasterize_points(&p, &pose(), 0.25).is_err());
    }
}
