//! Pinhole cameras: projection, unprojection and ring rigs around a model.
//!
//! Camera space is +Z forward, +X right, +Y down; the image origin is the
//! top-left corner. A world point `p` maps to camera space as `R p + t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointSet, RigidTransform, Vec3};

/// Points with camera-space depth at or below this are behind the camera.
pub const Z_NEAR: f64 = 1e-4;

pub const DEFAULT_IMAGE_SIZE: u32 = 512;
pub const DEFAULT_FOCAL: f64 = 512.0;
pub const DEFAULT_VIEWS: usize = 8;

/// Fraction of the image extent the model's bounding sphere may occupy.
const FIT_FILL: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            f64::from(width) / 2.0,
            f64::from(height) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < f64::from(self.width)
            && self.cy >= 0.0
            && self.cy < f64::from(self.height);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::centered(DEFAULT_FOCAL, DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE)
            .expect("default intrinsics are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub world_to_cam: RigidTransform,
    /// 1-based index of the view within its rig.
    pub view_index: u32,
}

/// Image-plane location of a point in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-space depth in meters.
    pub z: f64,
}

impl CameraPose {
    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.world_to_cam.inverse().apply(&Vec3::zeros())
    }

    /// `None` when the point is at or behind the near plane.
    pub fn project(&self, point: &Vec3) -> Option<Projection> {
        project_cam(&self.intrinsics, &self.world_to_cam.apply(point))
    }

    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<Vec3> {
        if !(z > 0.0) {
            return Err(Error::InvalidArgument(format!("depth {z} is not positive")));
        }
        let cam = unproject_cam(&self.intrinsics, u, v, z);
        let r = self.world_to_cam.rotation();
        Ok(r.transpose() * (cam - self.world_to_cam.translation()))
    }
}

pub fn project(point: &Vec3, pose: &CameraPose) -> Option<Projection> {
    pose.project(point)
}

pub fn unproject(u: f64, v: f64, z: f64, pose: &CameraPose) -> Result<Vec3> {
    pose.unproject(u, v, z)
}

pub(crate) fn project_cam(k: &Intrinsics, cam: &Vec3) -> Option<Projection> {
    if !(cam.z > Z_NEAR) {
        return None;
    }
    Some(Projection {
        u: k.fx * cam.x / cam.z + k.cx,
        v: k.fy * cam.y / cam.z + k.cy,
        z: cam.z,
    })
}

/// Camera-space point seen at pixel `(u, v)` with depth `z`.
pub(crate) fn unproject_cam(k: &Intrinsics, u: f64, v: f64, z: f64) -> Vec3 {
    Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

/// Camera at `eye` looking at `target`; `up` fixes the roll (image +Y is
/// the world `-up` direction projected onto the image plane).
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<RigidTransform> {
    let forward = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidArgument("eye coincides with target".into()))?;
    let down = (-up - forward * forward.dot(&-up))
        .try_normalize(1e-9)
        .ok_or_else(|| Error::InvalidArgument("view direction is parallel to up".into()))?;
    let right = down.cross(&forward);
    let rotation = nalgebra::Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    let translation = -(rotation * eye);
    RigidTransform::new(rotation, translation)
}

/// Placement of a ring rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingSpec {
    pub views: usize,
    pub center: Vec3,
    pub radius: f64,
    pub up: Vec3,
    pub elevation_deg: f64,
}

/// `views` cameras on a circle about `up` through `center`, at azimuths
/// `360° k / V`, all looking at `center`.
///
/// Azimuth 0 is the world +Z direction projected perpendicular to `up`
/// (+X when `up` is nearly parallel to Z).
pub fn make_ring_rig(spec: &RingSpec, intrinsics: Intrinsics) -> Result<Vec<CameraPose>> {
    if spec.views == 0 {
        return Err(Error::InvalidArgument("a rig needs at least one view".into()));
    }
    if !(spec.radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rig radius {} must be positive",
            spec.radius
        )));
    }
    if !(spec.elevation_deg.abs() < 90.0) {
        return Err(Error::InvalidArgument(
            "elevation must lie strictly between -90 and 90 degrees".into(),
        ));
    }
    intrinsics.validate()?;
    let up = spec
        .up
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidArgument("zero up vector".into()))?;
    let reference = if up.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let a0 = (reference - up * up.dot(&reference)).normalize();
    let b0 = up.cross(&a0);
    let elevation = spec.elevation_deg.to_radians();

    (0..spec.views)
        .map(|k| {
            let azimuth = std::f64::consts::TAU * k as f64 / spec.views as f64;
            let dir = a0 * azimuth.cos() + b0 * azimuth.sin();
            let offset = (dir * elevation.cos() + up * elevation.sin()) * spec.radius;
            let eye = spec.center + offset;
            Ok(CameraPose {
                intrinsics,
                world_to_cam: look_at(&eye, &spec.center, &up)?,
                view_index: k as u32 + 1,
            })
        })
        .collect()
}

/// Ring rig (up = +Y) centered on the bounding-box centroid, far enough
/// that the bounding sphere projects inside 90% of the image extent. The
/// bounding sphere is the one circumscribing the bounding box.
pub fn fit_rig_to_model(
    points: &PointSet,
    views: usize,
    intrinsics: Intrinsics,
    elevation_deg: f64,
) -> Result<Vec<CameraPose>> {
    let (lo, hi) = points
        .bounds()
        .ok_or_else(|| Error::InvalidArgument("cannot fit a rig to an empty model".into()))?;
    let center = (lo + hi) / 2.0;
    let sphere = (hi - lo).norm() / 2.0;
    if !(sphere > 1e-12) {
        return Err(Error::DegenerateExtent);
    }
    intrinsics.validate()?;
    let k = &intrinsics;
    let half_x = FIT_FILL * k.cx.min(f64::from(k.width) - k.cx);
    let half_y = FIT_FILL * k.cy.min(f64::from(k.height) - k.cy);
    let half_angle = (half_x / k.fx).atan().min((half_y / k.fy).atan());
    let radius = sphere / half_angle.sin();
    make_ring_rig(
        &RingSpec {
            views,
            center,
            radius,
            up: Vec3::y(),
            elevation_deg,
        },
        intrinsics,
    )
}

/// JSON document describing a rig; also the camera section of a bundle manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigJson {
    pub views: Vec<ViewJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewJson {
    pub index: u32,
    pub intrinsics: Intrinsics,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// An ordered list of camera poses with JSON (de)serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig(pub Vec<CameraPose>);

impl Rig {
    pub fn poses(&self) -> &[CameraPose] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pose(&self, view_index: u32) -> Option<&CameraPose> {
        self.0.iter().find(|p| p.view_index == view_index)
    }

    pub fn to_json(&self) -> RigJson {
        RigJson {
            views: self
                .0
                .iter()
                .map(|p| {
                    let xf = p.world_to_cam.to_json();
                    ViewJson {
                        index: p.view_index,
                        intrinsics: p.intrinsics,
                        rotation: xf.rotation,
                        translation: xf.translation,
                    }
                })
                .collect(),
        }
    }

    pub fn from_json(j: &RigJson) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        let poses = j
            .views
            .iter()
            .map(|v| {
                if !seen.insert(v.index) {
                    return Err(Error::Format(format!("duplicate view index {}", v.index)));
                }
                v.intrinsics.validate()?;
                Ok(CameraPose {
                    intrinsics: v.intrinsics,
                    world_to_cam: RigidTransform::from_row_major(v.rotation, v.translation)?,
                    view_index: v.index,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Rig(poses))
    }

    /// Canonical JSON bytes (pretty-printed, trailing newline).
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut b = serde_json::to_vec_pretty(&self.to_json()).expect("rig serializes");
        b.push(b'\n');
        b
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::io_util::write_bytes(path, &self.to_json_bytes())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&crate::io_util::read_json(path)?)
    }
}
