//! Software rendering of models into RGB, depth and point-index maps.
//!
//! The point-index map records, per pixel, which model point won the depth
//! test. Mask lifting reads it directly, so the renderer and lifting always
//! agree on visibility.

mod io;
mod mesh;
mod points;

use rayon::prelude::*;

pub use io::{read_depth, read_point_index, write_depth, write_point_index};
pub(crate) use io::{read_png, write_png};
pub use mesh::rasterize_mesh;
pub use points::{default_splat_radius, rasterize_points};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geom::Model;

/// `point_index` value of background pixels.
pub const SENTINEL: i32 = -1;

pub const BACKGROUND_RGB: [u8; 3] = [255, 255, 255];

/// Surface color used when the model carries none.
pub(crate) const DEFAULT_COLOR: [f32; 3] = [0.75, 0.75, 0.75];

/// Depth differences below this count as ties, resolved by primitive index.
pub(crate) const DEPTH_TIE_EPS: f64 = 1e-7;

/// Rows per parallel work unit.
pub(crate) const BAND_ROWS: usize = 16;

/// One rendered view. Buffers are row-major, `height` rows of `width` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
    /// Camera-space depth in meters; `+inf` on background.
    pub depth: Vec<f32>,
    pub point_index: Vec<i32>,
    pub view_index: u32,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub(crate) fn background(width: u32, height: u32, view_index: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            rgb: BACKGROUND_RGB.repeat(n),
            depth: vec![f32::INFINITY; n],
            point_index: vec![SENTINEL; n],
            view_index,
        }
    }

    /// Checks buffer sizes, depth/index consistency and `index < point_count`.
    pub fn validate(&self, point_count: usize) -> Result<()> {
        let n = self.pixel_count();
        if self.rgb.len() != 3 * n || self.depth.len() != n || self.point_index.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "render buffers do not match {}x{}",
                self.width, self.height
            )));
        }
        for (i, (&idx, &d)) in self.point_index.iter().zip(&self.depth).enumerate() {
            let fg = idx != SENTINEL;
            if fg != d.is_finite() {
                return Err(Error::Invariant(format!(
                    "pixel {i}: depth finiteness disagrees with point index"
                )));
            }
            if fg && (idx < 0 || idx as usize >= point_count) {
                return Err(Error::Invariant(format!(
                    "pixel {i}: point index {idx} outside 0..{point_count}"
                )));
            }
        }
        Ok(())
    }
}

/// Sorted, deduplicated indices of all points that won at least one pixel.
pub fn visible_points(out: &RenderOutput) -> Vec<u32> {
    let mut v: Vec<u32> = out
        .point_index
        .iter()
        .filter(|&&i| i != SENTINEL)
        .map(|&i| i as u32)
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Renders `model` from every pose, in parallel over views.
///
/// Meshes are rasterized; point sets are splatted with `splat_px`, or
/// [`default_splat_radius`] when `None`.
pub fn render_views(
    model: &Model,
    poses: &[CameraPose],
    splat_px: Option<f64>,
) -> Result<Vec<RenderOutput>> {
    poses
        .par_iter()
        .map(|pose| match model {
            Model::Mesh(mesh) => rasterize_mesh(mesh, pose),
            Model::Points(points) => {
                let r = splat_px.unwrap_or_else(|| default_splat_radius(points.len()));
                rasterize_points(points, pose, r)
            }
        })
        .collect()
}

/// Splits `height` rows into bands of [`BAND_ROWS`].
pub(crate) fn band_count(height: u32) -> usize {
    (height as usize).div_ceil(BAND_ROWS)
}

pub(crate) fn assemble_bands(
    width: u32,
    height: u32,
    view_index: u32,
    bands: Vec<RenderOutput>,
) -> RenderOutput {
    let mut out = RenderOutput {
        width,
        height,
        rgb: Vec::with_capacity(width as usize * height as usize * 3),
        depth: Vec::with_capacity(width as usize * height as usize),
        point_index: Vec::with_capacity(width as usize * height as usize),
        view_index,
    };
    for b in bands {
        out.rgb.extend_from_slice(&b.rgb);
        out.depth.extend_from_slice(&b.depth);
        out.point_index.extend_from_slice(&b.point_index);
    }
    out
}
