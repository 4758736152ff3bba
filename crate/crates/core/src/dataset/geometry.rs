//! Rigid transforms and the relative-pose parameterisation used as network
//! targets.
//!
//! Orientation components of a [`Pose6D`] follow the Z-Y-X convention:
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`, stored as `[yaw, pitch, roll]`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EULER_CONVENTION: &str = "ZYX: R = Rz(yaw) * Ry(pitch) * Rx(roll), stored as [yaw, pitch, roll]";

/// Pitch values within this distance of +-pi/2 are treated as gimbal lock.
pub const GIMBAL_LOCK_BAND: f64 = 1e-6;

/// Maximum entry of `|R^T R - I|` accepted when reading a rotation block.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-3;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let k = ((a - PI) / (2.0 * PI)).ceil();
    let w = a - 2.0 * PI * k;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Relative camera motion: translation in metres and Z-Y-X Euler angles.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6D {
    pub translation: [f64; 3],
    /// `[yaw, pitch, roll]` in radians.
    pub rotation: [f64; 3],
}

impl Pose6D {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [x, y, z] = self.translation;
        let [a, b, c] = self.rotation;
        [x, y, z, a, b, c]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Pose6D {
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5]],
        }
    }
}

pub fn euler_to_matrix(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Extracts `[yaw, pitch, roll]`. Inside the gimbal-lock band roll is set
/// to zero and the remaining rotation is attributed to yaw; the second
/// return value flags that case.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> ([f64; 3], bool) {
    let cp = (r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt();
    let pitch = (-r[(2, 0)]).atan2(cp);
    if FRAC_PI_2 - pitch.abs() < GIMBAL_LOCK_BAND {
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return ([yaw, pitch, 0.0], true);
    }
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    ([yaw, pitch, roll], false)
}

/// Rotation angle of `r` in radians, computed from both the symmetric and
/// antisymmetric parts so that it stays accurate near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    let c = (r.trace() - 1.0) / 2.0;
    s.atan2(c)
}

/// A rotation plus translation mapping points from the local frame to the
/// parent frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_pose(p: &Pose6D) -> Self {
        let [yaw, pitch, roll] = p.rotation;
        RigidTransform {
            rotation: euler_to_matrix(yaw, pitch, roll),
            translation: Vector3::from(p.translation),
        }
    }

    /// Parses a row-major `[R | t]` 3x4 block.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::format(None, format!("expected 12 values, found {}", v.len())));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !deviation.is_finite() || deviation > ORTHOGONALITY_TOLERANCE || rotation.determinant() <= 0.0 {
            return Err(Error::format(
                None,
                format!("rotation block is not a proper rotation (orthogonality deviation {deviation:.3e})"),
            ));
        }
        Ok(RigidTransform {
            rotation,
            translation: Vector3::new(v[3], v[7], v[11]),
        })
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self^-1 ∘ next` without forming the inverse explicitly.
    pub fn between(&self, next: &RigidTransform) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt * next.rotation,
            translation: rt * (next.translation - self.translation),
        }
    }
}

/// Motion from `prev` to `next`, expressed in the frame of `prev`.
pub fn absolute_to_relative(prev: &RigidTransform, next: &RigidTransform) -> Pose6D {
    let rel = prev.between(next);
    let (angles, gimbal) = matrix_to_euler(&rel.rotation);
    if gimbal {
        log::warn!("relative pose within {GIMBAL_LOCK_BAND} rad of gimbal lock; roll folded into yaw");
    }
    Pose6D {
        translation: rel.translation.into(),
        rotation: angles,
    }
}

/// Applies a relative motion to `prev`.
pub fn relative_to_absolute(prev: &RigidTransform, rel: &Pose6D) -> RigidTransform {
    prev.compose(&RigidTransform::from_pose(rel))
}

/// Folds relative motions onto `start`, returning `rels.len() + 1` poses.
pub fn compose_trajectory(start: &RigidTransform, rels: &[Pose6D]) -> Vec<RigidTransform> {
    let mut out = Vec::with_capacity(rels.len() + 1);
    out.push(*start);
    let mut cur = *start;
    for r in rels {
        cur = relative_to_absolute(&cur, r);
        out.push(cur);
    }
    out
}

/// Largest translation or rotation-entry difference between two poses.
pub fn transform_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let dr = (a.rotation - b.rotation).abs().max();
    let dt = (a.translation - b.translation).abs().max();
    dr.max(dt)
}
