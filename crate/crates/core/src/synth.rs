//! Deterministic synthetic fixtures with known ground truth, plus the
//! oracle proposal source that cuts masks exactly along ground-truth regions.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;

use crate::camera::{fit_rig_to_model, Intrinsics, Rig, DEFAULT_VIEWS};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::fusion::{class_palette, TextEmbeddingSet};
use crate::geom::{save_model, Model, PlyOptions, TriMesh, Vec3};
use crate::proposal::{write_bundle, BundleSource, Mask2D, MaskBits, ProposalBundle};
use crate::render::{render_views, RenderOutput};

/// Embedding dimension of oracle masks and prompts.
pub const ORACLE_DIM: usize = 16;
/// Longitude and latitude divisions of the sphere2 fixture (9902 vertices).
pub const SPHERE_SLICES: u32 = 100;
pub const SPHERE_STACKS: u32 = 100;
/// Icosphere subdivision level of the occluder's sphere (2562 vertices).
pub const OCCLUDER_SUBDIVISIONS: u32 = 4;

pub const MODEL_FILE: &str = "model.ply";
pub const GT_FILE: &str = "gt.json";
pub const RIG_FILE: &str = "rig.json";
pub const RENDERS_DIR: &str = "renders";
pub const BUNDLE_DIR: &str = "bundle";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Unit UV sphere (poles on +-Z) split into `z >= 0` and `z < 0`.
    Sphere2,
    /// Capsule along +Y cut into five equal-height bands.
    Capsule5,
    /// Unit sphere with an equatorial band hidden from the +-Z cameras by
    /// two plates.
    Occluder,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::Sphere2, SynthKind::Capsule5, SynthKind::Occluder];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Sphere2 => "sphere2",
            SynthKind::Capsule5 => "capsule5",
            SynthKind::Occluder => "occluder",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fixture `{s}` (expected sphere2, capsule5 or occluder)")))
    }
}

/// A colored mesh with one ground-truth class per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub kind: SynthKind,
    pub mesh: TriMesh,
    pub gt: Vec<u32>,
    pub prompts: Vec<String>,
}

impl SynthScene {
    pub fn model(&self) -> Model {
        Model::Mesh(self.mesh.clone())
    }

    pub fn classes(&self) -> usize {
        self.prompts.len()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            prompts: self.prompts.clone(),
            labels: self.gt.clone(),
        }
    }

    pub fn text_embeddings(&self) -> TextEmbeddingSet {
        oracle_text_embeddings(&self.prompts).expect("fixture prompts are unique")
    }
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
}

impl MeshBuilder {
    fn offset(&self) -> u32 {
        self.vertices.len() as u32
    }

    fn append(&mut self, vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) {
        let base = self.offset();
        self.vertices.extend(vertices);
        self.faces.extend(faces.into_iter().map(|f| f.map(|i| i + base)));
    }
}

/// Geodesic sphere from a subdivided icosahedron; `10 * 4^n + 2` vertices.
pub fn icosphere(subdivisions: u32, radius: f64) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a as usize] + v[b as usize]) / 2.0).normalize());
                v.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (v.into_iter().map(|p| p * radius).collect(), faces)
}

/// Surface of revolution about +Y through profile `(radius, y)` rings, closed
/// by a pole vertex below the first ring and above the last.
fn lathe(profile: &[(f64, f64)], bottom: f64, top: f64, slices: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut v = vec![Vec3::new(0.0, bottom, 0.0)];
    for &(r, y) in profile {
        for s in 0..slices {
            let a = std::f64::consts::TAU * f64::from(s) / f64::from(slices);
            v.push(Vec3::new(r * a.sin(), y, r * a.cos()));
        }
    }
    v.push(Vec3::new(0.0, top, 0.0));
    let ring = |i: u32, s: u32| 1 + i * slices + s % slices;
    let rings = profile.len() as u32;
    let top_idx = v.len() as u32 - 1;
    let mut f = Vec::new();
    for s in 0..slices {
        f.push([0, ring(0, s + 1), ring(0, s)]);
        f.push([top_idx, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    for i in 0..rings - 1 {
        for s in 0..slices {
            let (a, b, c, d) = (ring(i, s), ring(i, s + 1), ring(i + 1, s), ring(i + 1, s + 1));
            f.push([a, b, d]);
            f.push([a, d, c]);
        }
    }
    (v, f)
}

/// Latitude-longitude sphere with poles on +-Z: `slices * (stacks - 1) + 2`
/// vertices, with an exact `z = 0` ring when `stacks` is even.
pub fn uv_sphere(slices: u32, stacks: u32, radius: f64) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let profile: Vec<(f64, f64)> = (1..stacks)
        .map(|i| {
            let t = std::f64::consts::PI * f64::from(i) / f64::from(stacks);
            let y = if 2 * i == stacks { 0.0 } else { -radius * t.cos() };
            (radius * t.sin(), y)
        })
        .collect();
    let (v, f) = lathe(&profile, -radius, radius, slices);
    // Rotate +90 degrees about X so the lathe axis +Y becomes +Z.
    (v.into_iter().map(|p| Vec3::new(p.x, -p.z, p.y)).collect(), f)
}

/// Capsule of `radius` whose cylinder spans `y in [-half, half]`.
pub fn capsule(radius: f64, half: f64, slices: u32, cap_rings: u32, body_rings: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut profile = Vec::new();
    for i in 1..=cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * f64::from(i) / f64::from(cap_rings);
        profile.push((radius * phi.sin(), -half - radius * phi.cos()));
    }
    for i in 1..body_rings {
        profile.push((radius, -half + 2.0 * half * f64::from(i) / f64::from(body_rings)));
    }
    for i in (1..=cap_rings).rev() {
        let phi = std::f64::consts::FRAC_PI_2 * f64::from(i) / f64::from(cap_rings);
        profile.push((radius * phi.sin(), half + radius * phi.cos()));
    }
    lathe(&profile, -half - radius, half + radius, slices)
}

/// Flat grid in the plane `z`, `nx x ny` vertices.
fn plate(z: f64, x: (f64, f64), y: (f64, f64), nx: u32, ny: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut v = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            v.push(Vec3::new(
                x.0 + (x.1 - x.0) * f64::from(i) / f64::from(nx - 1),
                y.0 + (y.1 - y.0) * f64::from(j) / f64::from(ny - 1),
                z,
            ));
        }
    }
    let mut f = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            f.push([a, a + 1, a + nx + 1]);
            f.push([a, a + nx + 1, a + nx]);
        }
    }
    (v, f)
}

pub const OCCLUDER_PLATE_Z: f64 = 1.3;
pub const OCCLUDER_BAND: f64 = 0.2;

pub fn make_scene(kind: SynthKind) -> Result<SynthScene> {
    let mut b = MeshBuilder::default();
    let (gt, prompts): (Vec<u32>, Vec<&str>) = match kind {
        SynthKind::Sphere2 => {
            let (v, f) = uv_sphere(SPHERE_SLICES, SPHERE_STACKS, 1.0);
            b.append(v, f);
            let gt = b.vertices.iter().map(|p| u32::from(p.z < 0.0)).collect();
            (gt, vec!["front", "back"])
        }
        SynthKind::Capsule5 => {
            let (v, f) = capsule(0.5, 1.0, 96, 16, 40);
            b.append(v, f);
            let gt = b
                .vertices
                .iter()
                .map(|p| (((p.y + 1.5) / 0.6).floor() as i64).clamp(0, 4) as u32)
                .collect();
            (gt, vec!["bottom", "lower", "middle", "upper", "top"])
        }
        SynthKind::Occluder => {
            let (v, f) = icosphere(OCCLUDER_SUBDIVISIONS, 1.0);
            b.append(v, f);
            let sphere_count = b.vertices.len();
            for z in [OCCLUDER_PLATE_Z, -OCCLUDER_PLATE_Z] {
                let (v, f) = plate(z, (-1.2, 1.2), (-0.25, 0.25), 49, 11);
                b.append(v, f);
            }
            let gt = b
                .vertices
                .iter()
                .enumerate()
                .map(|(i, p)| match (i < sphere_count, p.y.abs() < OCCLUDER_BAND) {
                    (false, _) => 2,
                    (true, true) => 1,
                    (true, false) => 0,
                })
                .collect();
            (gt, vec!["sphere", "band", "plate"])
        }
    };
    let palette = class_palette(prompts.len());
    let colors = gt.iter().map(|&g: &u32| palette[g as usize]).collect();
    Ok(SynthScene {
        kind,
        mesh: TriMesh::new(b.vertices, b.faces, Some(colors))?,
        gt,
        prompts: prompts.into_iter().map(String::from).collect(),
    })
}

/// Unit vector `e_k` in [`ORACLE_DIM`] dimensions.
pub fn canonical_embedding(k: usize) -> Vec<f32> {
    let mut e = vec![0.0; ORACLE_DIM];
    e[k % ORACLE_DIM] = 1.0;
    e
}

pub fn oracle_text_embeddings(prompts: &[String]) -> Result<TextEmbeddingSet> {
    if prompts.len() > ORACLE_DIM {
        return Err(Error::InvalidArgument(format!(
            "oracle embeddings support at most {ORACLE_DIM} classes"
        )));
    }
    let rows: Vec<f64> = (0..prompts.len())
        .flat_map(canonical_embedding)
        .map(f64::from)
        .collect();
    TextEmbeddingSet::new(
        prompts.to_vec(),
        Array2::from_shape_vec((prompts.len(), ORACLE_DIM), rows).expect("shape"),
    )
}

/// Per view, one mask per ground-truth class visible in that view: the
/// pixels whose point index has that class. Mask ids are the class ids.
pub fn oracle_bundle(rig: &Rig, renders: &[RenderOutput], gt: &[u32], classes: usize) -> Result<ProposalBundle> {
    if classes > ORACLE_DIM {
        return Err(Error::InvalidArgument(format!(
            "oracle bundles support at most {ORACLE_DIM} classes"
        )));
    }
    let mut masks = Vec::new();
    let mut embeddings = Vec::new();
    for pose in rig.poses() {
        let r = renders
            .iter()
            .find(|r| r.view_index == pose.view_index)
            .ok_or_else(|| Error::InvalidArgument(format!("no render for view {}", pose.view_index)))?;
        r.validate(gt.len())?;
        let mut per_class = vec![MaskBits::repeat(false, r.pixel_count()); classes];
        for (px, &pi) in r.point_index.iter().enumerate() {
            if pi >= 0 {
                let g = gt[pi as usize] as usize;
                if g < classes {
                    per_class[g].set(px, true);
                }
            }
        }
        for (k, bits) in per_class.into_iter().enumerate() {
            if bits.any() {
                masks.push(Mask2D::new(pose.view_index, k as u32, r.width, r.height, bits)?);
                embeddings.push(canonical_embedding(k));
            }
        }
    }
    ProposalBundle::new(rig.clone(), masks, embeddings, ORACLE_DIM, BundleSource::Synthetic)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureOptions {
    pub views: usize,
    pub intrinsics: Intrinsics,
    pub elevation_deg: f64,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            views: DEFAULT_VIEWS,
            intrinsics: Intrinsics::default(),
            elevation_deg: 0.0,
        }
    }
}

/// Everything a fixture directory holds, in memory.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub scene: SynthScene,
    pub rig: Rig,
    pub renders: Vec<RenderOutput>,
    pub bundle: ProposalBundle,
}

pub fn build_fixture(kind: SynthKind, options: &FixtureOptions) -> Result<Fixture> {
    let scene = make_scene(kind)?;
    let model = scene.model();
    let rig = Rig(fit_rig_to_model(
        &model.points(),
        options.views,
        options.intrinsics,
        options.elevation_deg,
    )?);
    let renders = render_views(&model, rig.poses(), None)?;
    let bundle = oracle_bundle(&rig, &renders, &scene.gt, scene.classes())?;
    Ok(Fixture {
        scene,
        rig,
        renders,
        bundle,
    })
}

/// Writes `model.ply`, `gt.json`, `rig.json`, `renders/`, `bundle/`,
/// `prompts.json` and `text_embeddings.f32` under `dir`.
pub fn write_fixture(fixture: &Fixture, dir: &Path) -> Result<()> {
    let s = &fixture.scene;
    save_model(&s.model(), &dir.join(MODEL_FILE), None, None, &PlyOptions::default())?;
    s.ground_truth().write(&dir.join(GT_FILE))?;
    fixture.rig.write(&dir.join(RIG_FILE))?;
    for r in &fixture.renders {
        r.write_to_dir(&dir.join(RENDERS_DIR))?;
    }
    write_bundle(&fixture.bundle, &dir.join(BUNDLE_DIR))?;
    s.text_embeddings().write(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for n in 0..4 {
            let (v, f) = icosphere(n, 2.0);
            assert_eq!(v.len(), 10 * 4usize.pow(n) + 2);
            assert_eq!(f.len(), 20 * 4usize.pow(n));
            assert!(v.iter().all(|p| (p.norm() - 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn uv_sphere_counts() {
        let (v, f) = uv_sphere(12, 8, 1.5);
        assert_eq!(v.len(), 12 * 7 + 2);
        assert_eq!(f.len(), 2 * 12 * 7);
        assert!(v.iter().all(|p| (p.norm() - 1.5).abs() < 1e-12));
        assert_eq!(v.iter().filter(|p| p.z == 0.0).count(), 12);
        assert_eq!(v.iter().filter(|p| p.z.abs() == 1.5).count(), 2);
    }

    #[test]
    fn sphere2_split_by_z_sign() {
        let s = make_scene(SynthKind::Sphere2).unwrap();
        assert_eq!(s.classes(), 2);
        for (p, &g) in s.mesh.vertices().iter().zip(&s.gt) {
            assert_eq!(g, u32::from(p.z < 0.0));
        }
    }

    #[test]
    fn capsule_has_five_bands() {
        let s = make_scene(SynthKind::Capsule5).unwrap();
        for k in 0..5 {
            assert!(s.gt.contains(&k));
        }
    }

    #[test]
    fn oracle_masks_are_disjoint_per_view() {
        let f = build_fixture(
            SynthKind::Capsule5,
            &FixtureOptions {
                views: 3,
                intrinsics: Intrinsics::centered(64.0, 64, 64).unwrap(),
                elevation_deg: 10.0,
            },
        )
        .unwrap();
        for pose in f.rig.poses() {
            let ms: Vec<&Mask2D> = f.bundle.masks().iter().filter(|m| m.view_index == pose.view_index).collect();
            assert!(!ms.is_empty());
            for (i, a) in ms.iter().enumerate() {
                for b in &ms[i + 1..] {
                    assert!(!a.bits().iter_ones().any(|px| b.bits()[px]));
                }
            }
        }
    }

    #[test]
    fn unknown_kind() {
        assert!("cube".parse::<SynthKind>().is_err());
        assert_eq!("occluder".parse::<SynthKind>().unwrap(), SynthKind::Occluder);
    }
}
