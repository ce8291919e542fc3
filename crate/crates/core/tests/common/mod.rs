//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use mf3d_core::camera::{CameraPose, Intrinsics, Z_NEAR};
use mf3d_core::{RigidTransform, TriMesh, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pose(rng: &mut ChaCha8Rng, intrinsics: Intrinsics, view_index: u32) -> CameraPose {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vec3::z() } else { axis };
    let t = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    CameraPose {
        intrinsics,
        world_to_cam: RigidTransform::from_axis_angle(axis, rng.gen_range(-3.0..3.0), t).unwrap(),
        view_index,
    }
}

/// Independent triangles placed in front of `pose`, some overlapping in
/// depth. Every vertex has camera-space z in [1, 4].
pub fn random_mesh(rng: &mut ChaCha8Rng, pose: &CameraPose, triangles: usize) -> TriMesh {
    let k = pose.intrinsics;
    let (w, h) = (f64::from(k.width), f64::from(k.height));
    let cam_to_world = pose.world_to_cam.inverse();
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..triangles {
        let (cu, cv) = (rng.gen_range(-0.1 * w..1.1 * w), rng.gen_range(-0.1 * h..1.1 * h));
        let cz: f64 = rng.gen_range(1.5..3.5);
        let spread = rng.gen_range(0.1..0.4) * w;
        for _ in 0..3 {
            let u = cu + rng.gen_range(-spread..spread);
            let v = cv + rng.gen_range(-spread..spread);
            let z = cz + rng.gen_range(-0.5..0.5);
            let cam = Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
            vertices.push(cam_to_world.apply(&cam));
            colors.push([rng.gen(), rng.gen(), rng.gen()]);
        }
    }
    let faces = (0..triangles as u32).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
    TriMesh::new(vertices, faces, Some(colors)).unwrap()
}

/// Per-pixel ray casting through pixel centers: nearest double-sided hit,
/// ties within 1e-7 to the lower face; point index = vertex with the largest
/// barycentric weight, ties to the lower vertex id.
pub struct RayCast {
    pub point_index: Vec<i32>,
    pub depth: Vec<f64>,
}

pub fn ray_cast(mesh: &TriMesh, pose: &CameraPose) -> RayCast {
    let k = pose.intrinsics;
    let cam: Vec<Vec3> = mesh.vertices().iter().map(|p| pose.world_to_cam.apply(p)).collect();
    let n = k.pixel_count();
    let mut out = RayCast {
        point_index: vec![-1; n],
        depth: vec![f64::INFINITY; n],
    };
    for y in 0..k.height {
        for x in 0..k.width {
            let d = Vec3::new(
                (f64::from(x) + 0.5 - k.cx) / k.fx,
                (f64::from(y) + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let px = (y * k.width + x) as usize;
            for f in mesh.faces() {
                let [a, b, c] = f.map(|i| cam[i as usize]);
                let (e1, e2) = (b - a, c - a);
                let p = d.cross(&e2);
                let det = e1.dot(&p);
                if det.abs() < 1e-14 {
                    continue;
                }
                let inv = 1.0 / det;
                let s = -a;
                let u = s.dot(&p) * inv;
                let q = s.cross(&e1);
                let v = d.dot(&q) * inv;
                if u < 0.0 || v < 0.0 || u + v > 1.0 {
                    continue;
                }
                let z = e2.dot(&q) * inv;
                if z <= Z_NEAR || !(z < out.depth[px] - 1e-7) {
                    continue;
                }
                out.depth[px] = z;
                let weights = [1.0 - u - v, u, v];
                let mut best = 0;
                for i in 1..3 {
                    if weights[i] > weights[best] || (weights[i] == weights[best] && f[i] < f[best]) {
                        best = i;
                    }
                }
                out.point_index[px] = f[best] as i32;
            }
        }
    }
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Pixels whose center lies within 1 px of a projected triangle edge.
/// Requires every vertex in front of the camera.
pub fn edge_pixels(mesh: &TriMesh, pose: &CameraPose) -> Vec<bool> {
    let k = pose.intrinsics;
    let uv: Vec<(f64, f64)> = mesh
        .vertices()
        .iter()
        .map(|p| {
            let pr = pose.project(p).expect("vertex in front of the camera");
            (pr.u, pr.v)
        })
        .collect();
    let mut edge = vec![false; k.pixel_count()];
    for y in 0..k.height {
        for x in 0..k.width {
            let c = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            edge[(y * k.width + x) as usize] = mesh.faces().iter().any(|f| {
                (0..3).any(|i| segment_distance(c, uv[f[i] as usize], uv[f[(i + 1) % 3] as usize]) <= 1.0)
            });
        }
    }
    edge
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
