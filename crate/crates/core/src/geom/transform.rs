use nalgebra::{Matrix3, Rotation3, Unit};
use serde::{Deserialize, Serialize};

use super::{PointSet, Vec3};
use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

/// JSON form: row-major rotation and a translation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RigidTransformJson {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !(err <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidArgument(format!(
                "rotation is not proper orthonormal (|RR^T - I| = {err:.3e}, det = {det:.6})"
            )));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Result<Self> {
        let axis = Unit::try_new(axis, 1e-12)
            .ok_or_else(|| Error::InvalidArgument("zero rotation axis".into()))?;
        Ok(Self {
            rotation: Rotation3::from_axis_angle(&axis, angle).into_inner(),
            translation,
        })
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(&rotation),
            Vec3::from_column_slice(&translation),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Largest absolute entry difference over rotation and translation.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }

    pub fn to_json(&self) -> RigidTransformJson {
        RigidTransformJson {
            rotation: self.rotation_row_major(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }

    pub fn from_json(j: &RigidTransformJson) -> Result<Self> {
        Self::from_row_major(j.rotation, j.translation)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Maps every position through `xf`; normals are rotated only.
pub fn apply_transform(points: &PointSet, xf: &RigidTransform) -> PointSet {
    PointSet::from_parts_unchecked(
        points.positions().iter().map(|p| xf.apply(p)).collect(),
        points.colors().map(<[_]>::to_vec),
        points
            .normals()
            .map(|ns| ns.iter().map(|n| xf.rotate(n)).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.2f64..3.2,
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_filter_map("zero axis", |(a, ang, t)| {
                RigidTransform::from_axis_angle(Vec3::from(a), ang, Vec3::from(t)).ok()
            })
    }

    fn arb_points() -> impl Strategy<Value = Vec<Vec3>> {
        prop::collection::vec(prop::array::uniform3(-5.0f64..5.0).prop_map(Vec3::from), 2..20)
    }

    #[test]
    fn identity_and_translation() {
        let p = PointSet::new(vec![Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(apply_transform(&p, &RigidTransform::identity()), p);
        let origin = PointSet::new(vec![Vec3::zeros()]).unwrap();
        let moved = apply_transform(&origin, &RigidTransform::from_translation(Vec3::x()));
        assert_eq!(moved.positions()[0], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn rejects_non_rotation() {
        let scale = Matrix3::identity() * 2.0;
        assert!(RigidTransform::new(scale, Vec3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn normals_rotate_without_translation() {
        let p = PointSet::new(vec![Vec3::zeros()])
            .unwrap()
            .with_normals(vec![Vec3::x()])
            .unwrap();
        let xf = RigidTransform::from_axis_angle(
            Vec3::z(),
            std::f64::consts::FRAC_PI_2,
            Vec3::new(5.0, 5.0, 5.0),
        )
        .unwrap();
        let out = apply_transform(&p, &xf);
        assert!((out.normals().unwrap()[0] - Vec3::y()).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn inverse_round_trip(xf in arb_transform(), pts in arb_points()) {
            let set = PointSet::new(pts).unwrap();
            let back = apply_transform(&apply_transform(&set, &xf), &xf.inverse());
            for (a, b) in set.positions().iter().zip(back.positions()) {
                prop_assert!((a - b).amax() < 1e-9);
            }
        }

        #[test]
        fn preserves_pairwise_distances(xf in arb_transform(), pts in arb_points()) {
            let set = PointSet::new(pts).unwrap();
            let out = apply_transform(&set, &xf);
            let (a, b) = (set.positions(), out.positions());
            for i in 0..a.len() {
                for j in i + 1..a.len() {
                    prop_assert!(((a[i] - a[j]).norm() - (b[i] - b[j]).norm()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn composition_matches_sequential(a in arb_transform(), b in arb_transform(), pts in arb_points()) {
            let set = PointSet::new(pts).unwrap();
            let seq = apply_transform(&apply_transform(&set, &a), &b);
            let comp = apply_transform(&set, &b.compose(&a));
            for (x, y) in seq.positions().iter().zip(comp.positions()) {
                prop_assert!((x - y).amax() < 1e-9);
            }
        }
    }
}
