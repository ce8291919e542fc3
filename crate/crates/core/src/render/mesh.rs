//! Z-buffered triangle rasterization.
//!
//! Vertices are snapped to 1/256 pixel so edge functions are exact integers,
//! pixel centers sit at `(x + 0.5, y + 0.5)` and shared edges follow the
//! top-left fill rule. Triangles crossing the near plane are clipped in
//! camera space; every clipped vertex keeps its barycentric coordinates with
//! respect to the original face, so attribute interpolation and the
//! point-index rule always refer to the face's own vertices.

use rayon::prelude::*;

use super::{
    assemble_bands, band_count, RenderOutput, BAND_ROWS, DEFAULT_COLOR, DEPTH_TIE_EPS,
};
use crate::camera::{CameraPose, Z_NEAR};
use crate::error::{Error, Result};
use crate::geom::{channel_to_u8, TriMesh, Vec3};

const SUBPIXEL: f64 = 256.0;
const HALF_PIXEL: i64 = 128;

/// Snapped coordinates beyond this are not rasterized (keeps i128 edge
/// products far from overflow).
const MAX_FIXED: f64 = 1e15;

#[derive(Clone, Copy)]
struct ClipVertex {
    cam: Vec3,
    bary: [f64; 3],
}

#[derive(Clone, Copy)]
struct ScreenVertex {
    x: i64,
    y: i64,
    /// Unsnapped position; interpolation uses it so depth is exact.
    u: f64,
    v: f64,
    inv_z: f64,
    bary: [f64; 3],
}

struct SubTriangle {
    face: usize,
    v: [ScreenVertex; 3],
    x_range: (u32, u32),
    y_range: (u32, u32),
}

fn edge(a: &ScreenVertex, b: &ScreenVertex, px: i64, py: i64) -> i128 {
    i128::from(b.x - a.x) * i128::from(py - a.y) - i128::from(b.y - a.y) * i128::from(px - a.x)
}

fn edge_f(a: &ScreenVertex, b: &ScreenVertex, u: f64, v: f64) -> f64 {
    (b.u - a.u) * (v - a.v) - (b.v - a.v) * (u - a.u)
}

/// Screen-space barycentrics of `(u, v)` from the unsnapped vertices. Falls
/// back to the snapped geometry when the exact triangle is degenerate.
fn exact_barycentric(t: &[ScreenVertex; 3], u: f64, v: f64) -> [f64; 3] {
    let [a, b, c] = t;
    let area = edge_f(a, b, c.u, c.v);
    if area != 0.0 && area.is_finite() {
        return [edge_f(b, c, u, v) / area, edge_f(c, a, u, v) / area, edge_f(a, b, u, v) / area];
    }
    let (px, py) = ((u * SUBPIXEL) as i64, (v * SUBPIXEL) as i64);
    let area = edge(a, b, c.x, c.y) as f64;
    [
        edge(b, c, px, py) as f64 / area,
        edge(c, a, px, py) as f64 / area,
        edge(a, b, px, py) as f64 / area,
    ]
}

fn is_top_left(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    (dy == 0 && dx > 0) || dy < 0
}

fn clip_near(tri: [ClipVertex; 3]) -> Vec<ClipVertex> {
    let inside = |v: &ClipVertex| v.cam.z >= Z_NEAR;
    if tri.iter().all(inside) {
        return tri.to_vec();
    }
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        if inside(&a) {
            out.push(a);
        }
        if inside(&a) != inside(&b) {
            let t = (Z_NEAR - a.cam.z) / (b.cam.z - a.cam.z);
            let mut cam = a.cam + (b.cam - a.cam) * t;
            cam.z = Z_NEAR;
            let bary = std::array::from_fn(|k| a.bary[k] + (b.bary[k] - a.bary[k]) * t);
            out.push(ClipVertex { cam, bary });
        }
    }
    out
}

fn setup_face(
    face: usize,
    corners: [Vec3; 3],
    pose: &CameraPose,
) -> Vec<SubTriangle> {
    let k = &pose.intrinsics;
    let tri: [ClipVertex; 3] = std::array::from_fn(|i| {
        let mut bary = [0.0; 3];
        bary[i] = 1.0;
        ClipVertex {
            cam: pose.world_to_cam.apply(&corners[i]),
            bary,
        }
    });
    let poly = clip_near(tri);
    if poly.len() < 3 {
        return Vec::new();
    }
    let mut screen = Vec::with_capacity(poly.len());
    for cv in &poly {
        let u = k.fx * cv.cam.x / cv.cam.z + k.cx;
        let v = k.fy * cv.cam.y / cv.cam.z + k.cy;
        let (x, y) = ((u * SUBPIXEL).round(), (v * SUBPIXEL).round());
        if !(x.abs() < MAX_FIXED && y.abs() < MAX_FIXED) {
            return Vec::new();
        }
        screen.push(ScreenVertex {
            x: x as i64,
            y: y as i64,
            u,
            v,
            inv_z: 1.0 / cv.cam.z,
            bary: cv.bary,
        });
    }

    let (w, h) = (i64::from(k.width), i64::from(k.height));
    let mut out = Vec::new();
    for i in 1..screen.len() - 1 {
        let mut v = [screen[0], screen[i], screen[i + 1]];
        let mut area = edge(&v[0], &v[1], v[2].x, v[2].y);
        if area == 0 {
            continue;
        }
        if area < 0 {
            v.swap(1, 2);
            area = -area;
        }
        let min_x = v.iter().map(|p| p.x).min().expect("3 vertices");
        let max_x = v.iter().map(|p| p.x).max().expect("3 vertices");
        let min_y = v.iter().map(|p| p.y).min().expect("3 vertices");
        let max_y = v.iter().map(|p| p.y).max().expect("3 vertices");
        // Pixel p is a candidate when its center p*256+128 lies in the box.
        let x0 = (min_x - HALF_PIXEL).div_euclid(256) + i64::from((min_x - HALF_PIXEL).rem_euclid(256) != 0);
        let x1 = (max_x - HALF_PIXEL).div_euclid(256);
        let y0 = (min_y - HALF_PIXEL).div_euclid(256) + i64::from((min_y - HALF_PIXEL).rem_euclid(256) != 0);
        let y1 = (max_y - HALF_PIXEL).div_euclid(256);
        let (x0, x1) = (x0.max(0), x1.min(w - 1));
        let (y0, y1) = (y0.max(0), y1.min(h - 1));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        out.push(SubTriangle {
            face,
            v,
            x_range: (x0 as u32, x1 as u32),
            y_range: (y0 as u32, y1 as u32),
        });
    }
    out
}

/// Rasterizes `mesh` from `pose`.
///
/// Point `i` of the output's index space is mesh vertex `i`. Each covered
/// pixel records the vertex of the front-most face with the largest
/// perspective-correct barycentric weight (lowest vertex index on ties).
/// Back faces are drawn. Depth ties within `1e-7` go to the lower face index.
pub fn rasterize_mesh(mesh: &TriMesh, pose: &CameraPose) -> Result<RenderOutput> {
    if mesh.vertices().is_empty() || mesh.faces().is_empty() {
        return Err(Error::InvalidArgument("cannot rasterize an empty mesh".into()));
    }
    pose.intrinsics.validate()?;
    let (width, height) = (pose.intrinsics.width, pose.intrinsics.height);
    let verts = mesh.vertices();

    let subs: Vec<SubTriangle> = mesh
        .faces()
        .par_iter()
        .enumerate()
        .flat_map_iter(|(fi, f)| {
            setup_face(fi, f.map(|v| verts[v as usize]), pose)
        })
        .collect();

    // Bin by band, preserving ascending face order within each bin.
    let n_bands = band_count(height);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bands];
    for (si, s) in subs.iter().enumerate() {
        let (b0, b1) = (s.y_range.0 as usize / BAND_ROWS, s.y_range.1 as usize / BAND_ROWS);
        for bin in &mut bins[b0..=b1] {
            bin.push(si);
        }
    }

    let colors = mesh.vertex_colors();
    let bands: Vec<RenderOutput> = bins
        .par_iter()
        .enumerate()
        .map(|(band, bin)| {
            let row0 = (band * BAND_ROWS) as u32;
            let rows = (height - row0).min(BAND_ROWS as u32);
            let mut out = RenderOutput::background(width, rows, pose.view_index);
            let mut zbuf = vec![f64::INFINITY; width as usize * rows as usize];
            for &si in bin {
                let s = &subs[si];
                let face = mesh.faces()[s.face];
                let y_lo = s.y_range.0.max(row0);
                let y_hi = s.y_range.1.min(row0 + rows - 1);
                for y in y_lo..=y_hi {
                    let py = i64::from(y) * 256 + HALF_PIXEL;
                    for x in s.x_range.0..=s.x_range.1 {
                        let px = i64::from(x) * 256 + HALF_PIXEL;
                        let [a, b, c] = &s.v;
                        let w0 = edge(b, c, px, py);
                        let w1 = edge(c, a, px, py);
                        let w2 = edge(a, b, px, py);
                        let inside = |w: i128, p: &ScreenVertex, q: &ScreenVertex| {
                            w > 0 || (w == 0 && is_top_left(p, q))
                        };
                        if !(inside(w0, b, c) && inside(w1, c, a) && inside(w2, a, b)) {
                            continue;
                        }
                        let (cu, cv) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                        let l = exact_barycentric(&s.v, cu, cv);
                        let inv_z = l[0] * a.inv_z + l[1] * b.inv_z + l[2] * c.inv_z;
                        let z = 1.0 / inv_z;
                        let slot = (y - row0) as usize * width as usize + x as usize;
                        if !(z < zbuf[slot] - DEPTH_TIE_EPS) {
                            continue;
                        }
                        zbuf[slot] = z;
                        let persp = [
                            l[0] * a.inv_z * z,
                            l[1] * b.inv_z * z,
                            l[2] * c.inv_z * z,
                        ];
                        let bary: [f64; 3] = std::array::from_fn(|k| {
                            persp[0] * a.bary[k] + persp[1] * b.bary[k] + persp[2] * c.bary[k]
                        });
                        let mut best = 0;
                        for k in 1..3 {
                            if bary[k] > bary[best]
                                || (bary[k] == bary[best] && face[k] < face[best])
                            {
                                best = k;
                            }
                        }
                        out.point_index[slot] = face[best] as i32;
                        out.depth[slot] = z as f32;
                        let rgb = (0..3).map(|ch| {
                            let v: f64 = (0..3)
                                .map(|k| {
                                    let col = colors.map_or(DEFAULT_COLOR, |c| c[face[k] as usize]);
                                    bary[k] * f64::from(col[ch])
                                })
                                .sum();
                            channel_to_u8(v as f32)
                        });
                        for (dst, v) in out.rgb[slot * 3..slot * 3 + 3].iter_mut().zip(rgb) {
                            *dst = v;
                        }
                    }
                }
            }
            out
        })
        .collect();

    Ok(assemble_bands(width, height, pose.view_index, bands))
}
