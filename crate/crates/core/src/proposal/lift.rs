use rayon::prelude::*;

use super::Mask2D;
use crate::error::{Error, Result};
use crate::render::{RenderOutput, SENTINEL};

/// Masks with fewer foreground hits than this are discarded (at 512x512).
pub const DEFAULT_MIN_PIXELS: usize = 16;

/// A binary membership over the `P` model points, stored as sorted indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    pub view_index: u32,
    pub mask_id: u32,
    point_count: usize,
    members: Vec<u32>,
}

impl Mask3D {
    pub fn new(view_index: u32, mask_id: u32, point_count: usize, mut members: Vec<u32>) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.last().is_some_and(|&m| m as usize >= point_count) {
            return Err(Error::InvalidArgument(format!(
                "member index beyond point count {point_count}"
            )));
        }
        Ok(Self {
            view_index,
            mask_id,
            point_count,
            members,
        })
    }

    pub fn point_count(&self) -> usize {
        self.point_count
    }

    /// Sorted member indices.
    pub fn members(&self) -> &[u32] {
        &self.members
    }

    pub fn contains(&self, p: u32) -> bool {
        self.members.binary_search(&p).is_ok()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut v = vec![false; self.point_count];
        for &m in &self.members {
            v[m as usize] = true;
        }
        v
    }
}

/// Lifts a 2D mask through the view's point-index map: point `p` is a member
/// iff some masked pixel shows `p`. Returns `Ok(None)` when fewer than
/// `min_pixels` masked pixels land on the model.
pub fn lift_mask(
    mask: &Mask2D,
    render: &RenderOutput,
    point_count: usize,
    min_pixels: usize,
) -> Result<Option<Mask3D>> {
    if mask.view_index != render.view_index {
        return Err(Error::InvalidArgument(format!(
            "mask belongs to view {}, render is view {}",
            mask.view_index, render.view_index
        )));
    }
    if (mask.width(), mask.height()) != (render.width, render.height) {
        return Err(Error::DimensionMismatch(format!(
            "mask is {}x{}, render is {}x{}",
            mask.width(),
            mask.height(),
            render.width,
            render.height
        )));
    }
    let mut hits = 0usize;
    let mut members = Vec::new();
    for px in mask.bits().iter_ones() {
        let idx = render.point_index[px];
        if idx == SENTINEL {
            continue;
        }
        if idx < 0 || idx as usize >= point_count {
            return Err(Error::Invariant(format!(
                "render of view {} has point index {idx} outside 0..{point_count}",
                render.view_index
            )));
        }
        hits += 1;
        members.push(idx as u32);
    }
    if hits < min_pixels || hits == 0 {
        return Ok(None);
    }
    members.sort_unstable();
    members.dedup();
    Ok(Some(Mask3D {
        view_index: mask.view_index,
        mask_id: mask.mask_id,
        point_count,
        members,
    }))
}

/// Surviving 3D masks and, for each, its position in the input mask list.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedMasks {
    pub masks: Vec<Mask3D>,
    pub source_rows: Vec<usize>,
}

/// Lifts every mask against the render of its view, in parallel; output
/// order follows input order.
pub fn lift_all(
    masks: &[Mask2D],
    renders: &[RenderOutput],
    point_count: usize,
    min_pixels: usize,
) -> Result<LiftedMasks> {
    let lifted: Vec<Option<Mask3D>> = masks
        .par_iter()
        .map(|m| {
            let render = renders
                .iter()
                .find(|r| r.view_index == m.view_index)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no render for view {}", m.view_index))
                })?;
            lift_mask(m, render, point_count, min_pixels)
        })
        .collect::<Result<_>>()?;
    let mut out = LiftedMasks {
        masks: Vec::new(),
        source_rows: Vec::new(),
    };
    for (row, m) in lifted.into_iter().enumerate() {
        if let Some(m) = m {
            out.masks.push(m);
            out.source_rows.push(row);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{visible_points, RenderOutput};

    fn toy_render() -> RenderOutput {
        let mut r = RenderOutput::background(4, 3, 1);
        // Row-major 4x3; points 0..3 on the left half, background elsewhere.
        for (px, idx) in [(0, 0), (1, 0), (4, 1), (5, 2), (8, 3), (9, 3)] {
            r.point_index[px] = idx;
            r.depth[px] = 1.0;
        }
        r
    }

    #[test]
    fn background_mask_is_rejected() {
        let m = Mask2D::from_fn(1, 0, 4, 3, |x, _| x >= 2).unwrap();
        assert_eq!(lift_mask(&m, &toy_render(), 4, 1).unwrap(), None);
    }

    #[test]
    fn full_mask_lifts_to_visible_set() {
        let r = toy_render();
        let m = Mask2D::from_fn(1, 0, 4, 3, |_, _| true).unwrap();
        let lifted = lift_mask(&m, &r, 4, 1).unwrap().unwrap();
        assert_eq!(lifted.members(), &visible_points(&r)[..]);
    }

    #[test]
    fn min_pixels_counts_foreground_hits() {
        let r = toy_render();
        // Two pixels both showing point 3: 2 hits, one member.
        let m = Mask2D::from_fn(1, 0, 4, 3, |_, y| y == 2).unwrap();
        assert!(lift_mask(&m, &r, 4, 3).unwrap().is_none());
        let lifted = lift_mask(&m, &r, 4, 2).unwrap().unwrap();
        assert_eq!(lifted.members(), &[3]);
    }

    #[test]
    fn mismatches_are_errors() {
        let r = toy_render();
        let wrong_view = Mask2D::from_fn(2, 0, 4, 3, |_, _| true).unwrap();
        assert!(lift_mask(&wrong_view, &r, 4, 1).is_err());
        let wrong_size = Mask2D::from_fn(1, 0, 3, 4, |_, _| true).unwrap();
        assert!(matches!(lift_mask(&wrong_size, &r, 4, 1), Err(Error::DimensionMismatch(_))));
        let m = Mask2D::from_fn(1, 0, 4, 3, |_, _| true).unwrap();
        assert!(matches!(lift_mask(&m, &r, 2, 1), Err(Error::Invariant(_))));
    }
}
