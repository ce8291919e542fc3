//! RGB-D capture: depth clipping, unprojection to colored clouds,
//! calibration-chain solving, merging and radius outlier removal.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{unproject_cam, Intrinsics};
use crate::error::{Error, Result};
use crate::geom::{apply_transform, channel_from_u8, PointSet, RigidTransform, RigidTransformJson, Vec3};
use crate::io_util::{read_json, write_json};
use crate::render::{read_depth, read_png, write_depth, write_png};

pub const DEFAULT_CLIP_MIN: f64 = 0.1;
pub const DEFAULT_CLIP_MAX: f64 = 1.5;
pub const DEFAULT_OUTLIER_RADIUS: f64 = 0.02;
pub const DEFAULT_MIN_NEIGHBORS: usize = 5;
/// Maximum edge disagreement tolerated around calibration cycles.
pub const CYCLE_TOLERANCE: f64 = 1e-3;

pub const CALIB_FILE: &str = "calib.json";
pub const DEPTH_FILE: &str = "depth.f32";
pub const RGB_FILE: &str = "rgb.png";
pub const INTRINSICS_FILE: &str = "intrinsics.json";

/// One depth image in meters (0 = invalid) with aligned RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    camera_id: String,
    intrinsics: Intrinsics,
    depth: Vec<f32>,
    rgb: Vec<u8>,
}

impl DepthFrame {
    /// `depth` is row-major `H*W`, finite and non-negative; `rgb` is `H*W*3`.
    pub fn new(camera_id: impl Into<String>, intrinsics: Intrinsics, depth: Vec<f32>, rgb: Vec<u8>) -> Result<Self> {
        intrinsics.validate()?;
        let camera_id = camera_id.into();
        let n = intrinsics.pixel_count();
        if depth.len() != n || rgb.len() != 3 * n {
            return Err(Error::DimensionMismatch(format!(
                "frame `{camera_id}`: {} depth values and {} rgb bytes for {}x{}",
                depth.len(),
                rgb.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        if let Some(bad) = depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::Format(format!("frame `{camera_id}`: depth value {bad} is not a finite non-negative number")));
        }
        Ok(Self {
            camera_id,
            intrinsics,
            depth,
            rgb,
        })
    }

    pub fn camera_id(&self) -> &str {
        &self.camera_id
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// Reads `<dir>/{depth.f32, rgb.png, intrinsics.json}`. A missing
    /// `rgb.png` yields a mid-gray frame.
    pub fn read(dir: &Path, camera_id: &str) -> Result<Self> {
        let depth_path = dir.join(DEPTH_FILE);
        let k_path = dir.join(INTRINSICS_FILE);
        for p in [&depth_path, &k_path] {
            if !p.exists() {
                return Err(Error::MissingInput(p.clone()));
            }
        }
        let intrinsics: Intrinsics = read_json(&k_path)?;
        let (h, w, depth) = read_depth(&depth_path)?;
        if (w, h) != (intrinsics.width, intrinsics.height) {
            return Err(Error::DimensionMismatch(format!(
                "{}: {w}x{h} depth map for {}x{} intrinsics",
                depth_path.display(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        let rgb_path = dir.join(RGB_FILE);
        let rgb = if rgb_path.exists() {
            let (rw, rh, rgb) = read_png(&rgb_path)?;
            if (rw, rh) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "{}: {rw}x{rh} image for a {w}x{h} depth map",
                    rgb_path.display()
                )));
            }
            rgb
        } else {
            log::warn!("{} missing, coloring camera `{camera_id}` gray", rgb_path.display());
            vec![128; depth.len() * 3]
        };
        Self::new(camera_id, intrinsics, depth, rgb)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(INTRINSICS_FILE), &self.intrinsics)?;
        write_depth(&dir.join(DEPTH_FILE), self.height(), self.width(), &self.depth)?;
        write_png(&dir.join(RGB_FILE), self.width(), self.height(), &self.rgb)
    }
}

/// Zeroes depths outside `[min_m, max_m]`.
pub fn clip_depth_range(frame: &DepthFrame, min_m: f64, max_m: f64) -> Result<DepthFrame> {
    if !(min_m >= 0.0 && min_m < max_m) {
        return Err(Error::InvalidArgument(format!(
            "depth range [{min_m}, {max_m}] is not 0 <= min < max"
        )));
    }
    let depth = frame
        .depth
        .iter()
        .map(|&d| {
            let z = f64::from(d);
            if z >= min_m && z <= max_m {
                d
            } else {
                0.0
            }
        })
        .collect();
    Ok(DepthFrame {
        depth,
        ..frame.clone()
    })
}

/// One camera-frame point per valid pixel `(u, v) = (col, row)` on the
/// `stride` grid, in row-major order, colored from the RGB image.
pub fn depth_to_cloud(frame: &DepthFrame, stride: u32) -> Result<PointSet> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let (w, h) = (frame.width(), frame.height());
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for row in (0..h).step_by(stride as usize) {
        for col in (0..w).step_by(stride as usize) {
            let i = row as usize * w as usize + col as usize;
            let z = f64::from(frame.depth[i]);
            if z <= 0.0 {
                continue;
            }
            positions.push(unproject_cam(&frame.intrinsics, f64::from(col), f64::from(row), z));
            let c = &frame.rgb[3 * i..3 * i + 3];
            colors.push([channel_from_u8(c[0]), channel_from_u8(c[1]), channel_from_u8(c[2])]);
        }
    }
    Ok(PointSet::from_parts_unchecked(positions, Some(colors), None))
}

/// Relative pose between two cameras: maps camera-`a` coordinates to
/// camera-`b` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibEdge {
    pub a: String,
    pub b: String,
    pub a_to_b: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibGraph {
    pub edges: Vec<CalibEdge>,
    pub world: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibEdgeJson {
    a: String,
    b: String,
    #[serde(flatten)]
    transform: RigidTransformJson,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibJson {
    edges: Vec<CalibEdgeJson>,
    world: String,
}

impl CalibGraph {
    /// Camera ids in first-mention order, world first.
    pub fn cameras(&self) -> Vec<String> {
        let mut out = vec![self.world.clone()];
        for e in &self.edges {
            for id in [&e.a, &e.b] {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let j: CalibJson = read_json(path)?;
        let edges = j
            .edges
            .iter()
            .map(|e| {
                Ok(CalibEdge {
                    a: e.a.clone(),
                    b: e.b.clone(),
                    a_to_b: RigidTransform::from_json(&e.transform)
                        .map_err(|err| Error::Format(format!("calibration edge {}->{}: {err}", e.a, e.b)))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { edges, world: j.world })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let j = CalibJson {
            edges: self
                .edges
                .iter()
                .map(|e| CalibEdgeJson {
                    a: e.a.clone(),
                    b: e.b.clone(),
                    transform: e.a_to_b.to_json(),
                })
                .collect(),
            world: self.world.clone(),
        };
        write_json(path, &j)
    }
}

/// Camera-to-world transforms plus any cycle inconsistencies found.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldTransforms {
    pub cam_to_world: BTreeMap<String, RigidTransform>,
    pub warnings: Vec<String>,
}

/// Breadth-first from the world camera, visiting edges in list order; each
/// camera takes the composition along its first-found shortest path.
pub fn solve_world_transforms(graph: &CalibGraph) -> Result<WorldTransforms> {
    let mut adjacency: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in graph.edges.iter().enumerate() {
        if e.a == e.b {
            return Err(Error::Format(format!("calibration edge {i} links `{}` to itself", e.a)));
        }
        adjacency.entry(&e.a).or_default().push(i);
        adjacency.entry(&e.b).or_default().push(i);
    }
    let mut solved: BTreeMap<String, RigidTransform> = BTreeMap::new();
    solved.insert(graph.world.clone(), RigidTransform::identity());
    let mut queue = VecDeque::from([graph.world.as_str()]);
    while let Some(cur) = queue.pop_front() {
        let cur_to_world = solved[cur];
        for &i in adjacency.get(cur).map(Vec::as_slice).unwrap_or(&[]) {
            let e = &graph.edges[i];
            let (next, next_to_world) = if e.b == cur {
                (e.a.as_str(), cur_to_world.compose(&e.a_to_b))
            } else {
                (e.b.as_str(), cur_to_world.compose(&e.a_to_b.inverse()))
            };
            if !solved.contains_key(next) {
                solved.insert(next.to_string(), next_to_world);
                queue.push_back(next);
            }
        }
    }
    if let Some(lost) = graph.cameras().into_iter().find(|c| !solved.contains_key(c)) {
        return Err(Error::Format(format!(
            "camera `{lost}` is not connected to world camera `{}`",
            graph.world
        )));
    }
    let mut warnings = Vec::new();
    for e in &graph.edges {
        let via_edge = solved[&e.b].compose(&e.a_to_b);
        let diff = via_edge.max_abs_diff(&solved[&e.a]);
        if diff > CYCLE_TOLERANCE {
            let msg = format!(
                "calibration cycle through {}->{} disagrees by {diff:.3e}; keeping shortest-path result",
                e.a, e.b
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(WorldTransforms {
        cam_to_world: solved,
        warnings,
    })
}

/// Transforms each cloud to world and concatenates in input order.
pub fn merge_clouds(clouds: &[(PointSet, RigidTransform)]) -> Result<PointSet> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("no clouds to merge".into()));
    }
    let parts: Vec<PointSet> = clouds.iter().map(|(c, xf)| apply_transform(c, xf)).collect();
    Ok(PointSet::concat(&parts))
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Vec3, inv: f64) -> Cell {
    (
        (p.x * inv).floor() as i64,
        (p.y * inv).floor() as i64,
        (p.z * inv).floor() as i64,
    )
}

/// Keeps a point iff at least `min_neighbors` other points lie within the
/// closed ball of `radius_m` around it. Returns the kept points (original
/// order) and the ascending removed indices.
pub fn radius_outlier_removal(points: &PointSet, radius_m: f64, min_neighbors: usize) -> Result<(PointSet, Vec<usize>)> {
    if !(radius_m > 0.0 && radius_m.is_finite()) {
        return Err(Error::InvalidArgument(format!("outlier radius {radius_m} must be positive")));
    }
    if min_neighbors == 0 {
        return Ok((points.clone(), Vec::new()));
    }
    let pos = points.positions();
    // Cells slightly larger than the radius keep every neighbor within one
    // cell despite rounding in the division.
    let inv = 1.0 / (radius_m * (1.0 + 1e-9));
    let mut grid: HashMap<Cell, Vec<u32>> = HashMap::new();
    for (i, p) in pos.iter().enumerate() {
        grid.entry(cell_of(p, inv)).or_default().push(i as u32);
    }
    let r2 = radius_m * radius_m;
    let keep: Vec<bool> = pos
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy, cz) = cell_of(p, inv);
            let mut count = 0;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &j in bucket {
                            if j as usize != i && (pos[j as usize] - p).norm_squared() <= r2 {
                                count += 1;
                                if count >= min_neighbors {
                                    return true;
                                }
                            }
                        }
                    }
                }
            }
            false
        })
        .collect();
    let kept: Vec<usize> = (0..pos.len()).filter(|&i| keep[i]).collect();
    let removed = (0..pos.len()).filter(|&i| !keep[i]).collect();
    Ok((points.select(&kept), removed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureParams {
    pub clip_min: f64,
    pub clip_max: f64,
    pub radius: f64,
    pub min_neighbors: usize,
    pub stride: u32,
}

impl Default for CaptureParams {
    fn default() -> Self {
        Self {
            clip_min: DEFAULT_CLIP_MIN,
            clip_max: DEFAULT_CLIP_MAX,
            radius: DEFAULT_OUTLIER_RADIUS,
            min_neighbors: DEFAULT_MIN_NEIGHBORS,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaptureResult {
    pub cloud: PointSet,
    pub merged_count: usize,
    pub removed: usize,
    pub warnings: Vec<String>,
}

/// Runs the capture pipeline over `<root>/calib.json` and one
/// `<root>/<camera_id>/` directory per calibrated camera.
pub fn capture_scene(root: &Path, params: &CaptureParams) -> Result<CaptureResult> {
    let graph = CalibGraph::read(&root.join(CALIB_FILE))?;
    let solved = solve_world_transforms(&graph)?;
    let mut warnings = solved.warnings.clone();
    let cameras = graph.cameras();
    let clouds = cameras
        .par_iter()
        .map(|id| {
            let frame = DepthFrame::read(&root.join(id), id)?;
            let frame = clip_depth_range(&frame, params.clip_min, params.clip_max)?;
            Ok((depth_to_cloud(&frame, params.stride)?, solved.cam_to_world[id]))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_clouds(&clouds)?;
    if merged.is_empty() {
        let msg = "no valid depth pixels in any frame; cloud is empty".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let (cloud, removed) = radius_outlier_removal(&merged, params.radius, params.min_neighbors)?;
    Ok(CaptureResult {
        merged_count: merged.len(),
        removed: removed.len(),
        cloud,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(w: u32, h: u32, depth: Vec<f32>) -> DepthFrame {
        let k = Intrinsics::new(100.0, 100.0, f64::from((w - 1) / 2), f64::from((h - 1) / 2), w, h).unwrap();
        let rgb = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        DepthFrame::new("cam0", k, depth, rgb).unwrap()
    }

    #[test]
    fn clip_examples() {
        let f = frame(2, 2, vec![0.05, 1.0, 0.0, 2.0]);
        let c = clip_depth_range(&f, 0.1, 1.5).unwrap();
        assert_eq!(c.depth(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(clip_depth_range(&f, 1.5, 0.1).is_err());
        let zero = frame(2, 2, vec![0.0; 4]);
        assert_eq!(clip_depth_range(&zero, 0.1, 1.5).unwrap(), zero);
    }

    #[test]
    fn center_and_offset_pixels() {
        let mut d = vec![0.0; 5 * 3];
        d[5 + 2] = 1.0;
        let cloud = depth_to_cloud(&frame(5, 3, d), 1).unwrap();
        assert_eq!(cloud.positions(), &[Vec3::new(0.0, 0.0, 1.0)]);

        let k = Intrinsics::new(2.0, 2.0, 1.0, 1.0, 4, 3).unwrap();
        let mut d = vec![0.0; 12];
        d[4 + 3] = 2.0;
        let f = DepthFrame::new("c", k, d, vec![0; 36]).unwrap();
        assert_eq!(depth_to_cloud(&f, 1).unwrap().positions(), &[Vec3::new(2.0, 0.0, 2.0)]);
    }

    #[test]
    fn stride_subsamples_grid() {
        let f = frame(4, 4, vec![1.0; 16]);
        assert_eq!(depth_to_cloud(&f, 2).unwrap().len(), 4);
        assert!(depth_to_cloud(&f, 0).is_err());
    }

    #[test]
    fn frame_validation() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 2, 1).unwrap();
        assert!(DepthFrame::new("c", k, vec![1.0], vec![0; 6]).is_err());
        assert!(DepthFrame::new("c", k, vec![1.0, -1.0], vec![0; 6]).is_err());
        assert!(DepthFrame::new("c", k, vec![1.0, f32::NAN], vec![0; 6]).is_err());
    }

    fn t(x: f64) -> RigidTransform {
        RigidTransform::from_translation(Vec3::new(x, 0.0, 0.0))
    }

    #[test]
    fn world_alone_and_chain() {
        let alone = CalibGraph {
            edges: vec![],
            world: "w".into(),
        };
        let s = solve_world_transforms(&alone).unwrap();
        assert_eq!(s.cam_to_world.len(), 1);
        assert_eq!(s.cam_to_world["w"], RigidTransform::identity());

        let chain = CalibGraph {
            edges: vec![CalibEdge {
                a: "A".into(),
                b: "B".into(),
                a_to_b: t(1.0),
            }],
            world: "B".into(),
        };
        let s = solve_world_transforms(&chain).unwrap();
        assert_eq!(s.cam_to_world["A"].translation(), &Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn disconnected_camera_is_an_error() {
        let g = CalibGraph {
            edges: vec![
                CalibEdge { a: "A".into(), b: "B".into(), a_to_b: t(1.0) },
                CalibEdge { a: "C".into(), b: "D".into(), a_to_b: t(1.0) },
            ],
            world: "A".into(),
        };
        assert!(solve_world_transforms(&g).is_err());
    }

    #[test]
    fn contradictory_cycle_warns() {
        let g = CalibGraph {
            edges: vec![
                CalibEdge { a: "A".into(), b: "B".into(), a_to_b: t(1.0) },
                CalibEdge { a: "B".into(), b: "C".into(), a_to_b: t(1.0) },
                CalibEdge { a: "A".into(), b: "C".into(), a_to_b: t(2.5) },
            ],
            world: "C".into(),
        };
        let s = solve_world_transforms(&g).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert_eq!(s.cam_to_world["A"].translation().x, 2.5);
    }

    #[test]
    fn calib_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = CalibGraph {
            edges: vec![CalibEdge {
                a: "cam1".into(),
                b: "cam0".into(),
                a_to_b: RigidTransform::from_axis_angle(Vec3::z(), 0.3, Vec3::new(1.0, 2.0, 3.0)).unwrap(),
            }],
            world: "cam0".into(),
        };
        let p = dir.path().join(CALIB_FILE);
        g.write(&p).unwrap();
        assert_eq!(CalibGraph::read(&p).unwrap(), g);
    }

    #[test]
    fn merge_examples() {
        let a = PointSet::new(vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let b = PointSet::new(vec![Vec3::new(2.0, 0.0, 0.0)]).unwrap();
        let m = merge_clouds(&[(a.clone(), RigidTransform::identity())]).unwrap();
        assert_eq!(m, a);
        let m = merge_clouds(&[(a, RigidTransform::identity()), (b, t(1.0))]).unwrap();
        assert_eq!(m.positions(), &[Vec3::new(1.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0)]);
        assert!(merge_clouds(&[]).is_err());
    }

    #[test]
    fn outlier_examples() {
        let p = PointSet::new(vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(radius_outlier_removal(&p, 0.5, 0).unwrap().0, p);
        let (kept, removed) = radius_outlier_removal(&p, 0.5, 1).unwrap();
        assert!(kept.is_empty());
        assert_eq!(removed, vec![0, 1]);
        // Exactly on the boundary counts as inside.
        let (kept, _) = radius_outlier_removal(&p, 1.0, 1).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(radius_outlier_removal(&p, 0.0, 1).is_err());
    }

    fn random_cloud(seed: u64, n: usize) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new((0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn outlier_removal_is_monotone(seed in any::<u64>(), m in 0usize..6) {
            let c = random_cloud(seed, 300);
            let (_, r0) = radius_outlier_removal(&c, 0.1, m).unwrap();
            let (_, r1) = radius_outlier_removal(&c, 0.1, m + 1).unwrap();
            prop_assert!(r0.iter().all(|i| r1.contains(i)));
        }

        #[test]
        fn point_count_equals_valid_pixels(depth in prop::collection::vec(prop_oneof![Just(0.0f32), 0.01f32..3.0], 12)) {
            let f = frame(4, 3, depth);
            prop_assert_eq!(depth_to_cloud(&f, 1).unwrap().len(), f.valid_count());
        }
    }
}
