//! Core 3D types: point sets, triangle meshes, rigid transforms and PLY IO.

mod ply;
mod transform;

use std::path::Path;

pub use ply::{load_model, save_model, PlyEncoding, PlyOptions, PositionPrecision};
pub use transform::{apply_transform, RigidTransform, RigidTransformJson};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Linear RGB in `[0, 1]`.
pub type Rgb = [f32; 3];

/// Gray used for the reserved "other" class.
pub const OTHER_GRAY: [u8; 3] = [128, 128, 128];

const NORMAL_TOL: f64 = 1e-4;

/// Converts a `[0, 1]` channel to 8 bits, rounding half up.
pub fn channel_to_u8(c: f32) -> u8 {
    (f64::from(c.clamp(0.0, 1.0)) * 255.0 + 0.5).floor() as u8
}

pub fn channel_from_u8(c: u8) -> f32 {
    f32::from(c) / 255.0
}

pub fn rgb_to_u8(c: Rgb) -> [u8; 3] {
    [channel_to_u8(c[0]), channel_to_u8(c[1]), channel_to_u8(c[2])]
}

pub fn rgb_from_u8(c: [u8; 3]) -> Rgb {
    [channel_from_u8(c[0]), channel_from_u8(c[1]), channel_from_u8(c[2])]
}

/// A set of `P` points with optional per-point colors and unit normals.
///
/// This is the unit segmentation is defined over; meshes and Gaussian
/// splats reduce to it. An empty set is representable (a capture frame
/// may have no valid depth) but most consumers require `P >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    positions: Vec<Vec3>,
    colors: Option<Vec<Rgb>>,
    normals: Option<Vec<Vec3>>,
}

impl PointSet {
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self {
            positions,
            colors: None,
            normals: None,
        })
    }

    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            colors: None,
            normals: None,
        }
    }

    pub fn with_colors(mut self, colors: Vec<Rgb>) -> Result<Self> {
        if colors.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} colors for {} points",
                colors.len(),
                self.len()
            )));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} normals for {} points",
                normals.len(),
                self.len()
            )));
        }
        if let Some(i) = normals
            .iter()
            .position(|n| (n.norm() - 1.0).abs() > NORMAL_TOL)
        {
            return Err(Error::InvalidArgument(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty set.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Concatenates sets. Colors/normals survive only if every part has them.
    pub fn concat(parts: &[PointSet]) -> PointSet {
        let positions = parts.iter().flat_map(|p| p.positions.iter().copied()).collect();
        let colors = parts
            .iter()
            .map(|p| p.colors.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|cs| cs.into_iter().flatten().copied().collect());
        let normals = parts
            .iter()
            .map(|p| p.normals.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|ns| ns.into_iter().flatten().copied().collect());
        PointSet {
            positions,
            colors,
            normals,
        }
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        PointSet {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
        }
    }

    pub(crate) fn from_parts_unchecked(
        positions: Vec<Vec3>,
        colors: Option<Vec<Rgb>>,
        normals: Option<Vec<Vec3>>,
    ) -> Self {
        Self {
            positions,
            colors,
            normals,
        }
    }
}

/// Indexed triangle mesh with optional per-vertex colors.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    vertex_colors: Option<Vec<Rgb>>,
}

impl TriMesh {
    /// Every face index must be in range and the three indices distinct.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        vertex_colors: Option<Vec<Rgb>>,
    ) -> Result<Self> {
        if let Some(i) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "vertex {i} has a non-finite coordinate"
            )));
        }
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidArgument(format!(
                    "face {fi} references a vertex beyond {n}"
                )));
            }
            if is_degenerate(f) {
                return Err(Error::InvalidArgument(format!("face {fi} is degenerate")));
            }
        }
        if let Some(c) = &vertex_colors {
            if c.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} vertex colors for {n} vertices",
                    c.len()
                )));
            }
        }
        Ok(Self {
            vertices,
            faces,
            vertex_colors,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn vertex_colors(&self) -> Option<&[Rgb]> {
        self.vertex_colors.as_deref()
    }

    /// The vertex set as a point cloud; point `i` is vertex `i`.
    pub fn vertices_as_points(&self) -> PointSet {
        PointSet {
            positions: self.vertices.clone(),
            colors: self.vertex_colors.clone(),
            normals: None,
        }
    }
}

pub(crate) fn is_degenerate(f: &[u32; 3]) -> bool {
    f[0] == f[1] || f[1] == f[2] || f[0] == f[2]
}

/// Free-function form of [`TriMesh::vertices_as_points`].
pub fn mesh_vertices_as_points(mesh: &TriMesh) -> PointSet {
    mesh.vertices_as_points()
}

/// What [`load_model`] should interpret a PLY file as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    /// Mesh if a face element is present, otherwise points.
    #[default]
    Auto,
    Mesh,
    Points,
    /// 3D Gaussian splats: centers plus DC spherical-harmonic colors.
    Gaussians,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ModelKind::Auto),
            "mesh" => Ok(ModelKind::Mesh),
            "points" => Ok(ModelKind::Points),
            "gaussians" => Ok(ModelKind::Gaussians),
            other => Err(Error::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mesh(TriMesh),
    Points(PointSet),
}

impl Model {
    pub fn load(path: impl AsRef<Path>, kind: ModelKind) -> Result<Self> {
        load_model(path.as_ref(), kind)
    }

    /// The points segmentation is defined over.
    pub fn points(&self) -> PointSet {
        match self {
            Model::Mesh(m) => m.vertices_as_points(),
            Model::Points(p) => p.clone(),
        }
    }

    pub fn point_count(&self) -> usize {
        match self {
            Model::Mesh(m) => m.vertices().len(),
            Model::Points(p) => p.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_rounding_is_half_up() {
        assert_eq!(channel_to_u8(0.0), 0);
        assert_eq!(channel_to_u8(1.0), 255);
        assert_eq!(channel_to_u8(0.5), 128);
        assert_eq!(channel_to_u8(2.0), 255);
        for v in 0..=255u8 {
            assert_eq!(channel_to_u8(channel_from_u8(v)), v);
        }
    }

    #[test]
    fn mesh_rejects_bad_faces() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]], None).is_err());
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 1]], None).is_err());
        assert!(TriMesh::new(v, vec![[0, 1, 2]], None).is_ok());
    }

    #[test]
    fn vertices_as_points_keeps_colors_in_order() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let colors = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mesh = TriMesh::new(v.clone(), vec![[0, 1, 2]], Some(colors.clone())).unwrap();
        let pts = mesh_vertices_as_points(&mesh);
        assert_eq!(pts.len(), 3);
        assert_eq!(pts.positions(), &v[..]);
        assert_eq!(pts.colors().unwrap(), &colors[..]);
    }

    #[test]
    fn point_set_validates_attributes() {
        let p = PointSet::new(vec![Vec3::zeros(), Vec3::x()]).unwrap();
        assert!(p.clone().with_colors(vec![[0.0; 3]]).is_err());
        assert!(p.clone().with_normals(vec![Vec3::x(), Vec3::new(0.0, 2.0, 0.0)]).is_err());
        assert!(p.with_normals(vec![Vec3::x(), Vec3::y()]).is_ok());
        assert!(PointSet::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }
}
