//! Rigid-body poses used for collider placement and camera extrinsics.

use nalgebra::{Isometry3, Point3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Rotation plus translation mapping local coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    iso: Isometry3<f64>,
}

impl RigidPose {
    /// Identity pose (local frame coincides with world frame).
    pub fn identity() -> Self {
        Self { iso: Isometry3::identity() }
    }

    /// Pose from a translation and a unit quaternion.
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { iso: Isometry3::from_parts(Translation3::from(translation), rotation) }
    }

    /// Pure translation.
    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(translation, UnitQuaternion::identity())
    }

    /// Rotation of `angle` radians about `axis` through the world origin,
    /// with no translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = Unit::new_normalize(axis);
        Self::new(Vector3::zeros(), UnitQuaternion::from_axis_angle(&axis, angle))
    }

    /// Rotation of `angle` radians about `axis` through `pivot`.
    pub fn rotation_about(axis: Vector3<f64>, pivot: Vector3<f64>, angle: f64) -> Self {
        let rot = UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle);
        let translation = pivot - rot * pivot;
        Self::new(translation, rot)
    }

    /// World translation component.
    pub fn translation(&self) -> Vector3<f64> {
        self.iso.translation.vector
    }

    /// Rotation component.
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.iso.rotation
    }

    /// Map a local point to world coordinates.
    pub fn transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        (self.iso * Point3::from(p)).coords
    }

    /// Map a local direction to world coordinates (rotation only).
    pub fn transform_vector(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.iso * v
    }

    /// Map a world point into the local frame.
    pub fn inverse_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        (self.iso.inverse_transform_point(&Point3::from(p))).coords
    }

    /// Map a world direction into the local frame.
    pub fn inverse_vector(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.iso.inverse_transform_vector(&v)
    }

    /// Composition: `self` applied after `other` (`(self * other)(p) = self(other(p))`).
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        Self { iso: self.iso * other.iso }
    }

    /// Inverse pose.
    pub fn inverse(&self) -> RigidPose {
        Self { iso: self.iso.inverse() }
    }

    /// Spherical-linear interpolation between two poses, `t` in [0, 1].
    pub fn interpolate(&self, other: &RigidPose, t: f64) -> RigidPose {
        let translation = self.translation().lerp(&other.translation(), t);
        let rotation = self.rotation().slerp(&other.rotation(), t);
        Self::new(translation, rotation)
    }

    /// Quaternion norm drift from 1; kept below 1e-9 by nalgebra's unit type.
    pub fn rotation_norm_error(&self) -> f64 {
        (self.iso.rotation.as_ref().norm() - 1.0).abs()
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Serializable pose spec: translation plus axis-angle rotation in degrees.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseSpec {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    #[serde(default)]
    pub angle_deg: f64,
}

fn default_axis() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self { translation: [0.0; 3], axis: default_axis(), angle_deg: 0.0 }
    }
}

impl PoseSpec {
    /// Build the runtime pose. A zero axis is treated as "no rotation".
    pub fn to_pose(&self) -> RigidPose {
        let t = Vector3::from(self.translation);
        let axis = Vector3::from(self.axis);
        if axis.norm() == 0.0 || self.angle_deg == 0.0 {
            RigidPose::from_translation(t)
        } else {
            let rot = UnitQuaternion::from_axis_angle(
                &Unit::new_normalize(axis),
                self.angle_deg.to_radians(),
            );
            RigidPose::new(t, rot)
        }
    }
}
