//! Rigid-body transforms on SE(3).
//!
//! Rotations are stored as unit quaternions and tangent vectors as [`Twist`]s
//! whose rotational part is a Rodrigues vector. Jacobians and solver updates
//! follow the left-perturbation convention, `T <- exp(delta) * T`, so that
//! perturbations are expressed in the camera frame.

use std::fmt;

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::de::{self, Deserializer};
use serde::ser::{SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this angle the exp/log coefficients switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-2;

/// Rotations at or beyond `PI - LOG_ANGLE_MARGIN` have an ill-conditioned logarithm.
pub const LOG_ANGLE_MARGIN: f64 = 1e-6;

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Element of se(3): translation part `tau` (mm) and Rodrigues rotation vector `phi` (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub tau: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(tau: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { tau, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Stacked as `(tau_x, tau_y, tau_z, phi_x, phi_y, phi_z)`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            tau: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.tau.x, self.tau.y, self.tau.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }
}

/// An element of SE(3), acting on points as `R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidMotion {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a motion from a (not necessarily normalized) quaternion `w, x, y, z`.
    pub fn from_parts(rotation: Quaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_quaternion(rotation),
            translation,
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::from_parts(rotation.into_inner(), translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized), no translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Self::exp(&Twist::new(Vector3::zeros(), axis * (angle / n)))
    }

    /// Rotation by `angle` about an axis through `center`, followed by nothing else.
    pub fn rotation_about(center: &Vector3<f64>, axis: &Vector3<f64>, angle: f64) -> Self {
        let rot = Self::from_axis_angle(axis, angle);
        Self::from_translation(*center)
            .compose(&rot)
            .compose(&Self::from_translation(-center))
    }

    /// Reads a homogeneous 4x4 matrix; the rotation block is projected onto SO(3).
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&r));
        Self::from_rotation(rotation, Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        RigidMotion {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidMotion {
        let inv = self.rotation.inverse();
        RigidMotion {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn act(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|c| c.is_finite())
            && self.translation.iter().all(|c| c.is_finite())
    }

    /// SE(3) exponential with the closed-form V matrix.
    pub fn exp(twist: &Twist) -> RigidMotion {
        let phi = twist.phi;
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let (real, imag_scale, a, b) = if theta < SMALL_ANGLE {
            let t4 = theta2 * theta2;
            (
                1.0 - theta2 / 8.0 + t4 / 384.0,
                0.5 - theta2 / 48.0 + t4 / 3840.0,
                0.5 - theta2 / 24.0 + t4 / 720.0,
                1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
            )
        } else {
            let half = 0.5 * theta;
            let s = half.sin();
            (
                half.cos(),
                s / theta,
                2.0 * s * s / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let k = skew(&phi);
        let v = Matrix3::identity() + k * a + k * k * b;
        RigidMotion {
            rotation: UnitQuaternion::from_quaternion(Quaternion::from_parts(
                real,
                phi * imag_scale,
            )),
            translation: v * twist.tau,
        }
    }

    /// SE(3) logarithm on the principal branch.
    pub fn log(&self) -> Result<Twist> {
        let q = self.rotation.quaternion();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let vn = v.norm();
        let theta = 2.0 * vn.atan2(w);
        if theta >= std::f64::consts::PI - LOG_ANGLE_MARGIN {
            return Err(Error::AngleNearPi { angle: theta });
        }
        // theta / |v| without cancellation near zero.
        let scale = if vn < 1e-7 {
            2.0 / w * (1.0 - vn * vn / (3.0 * w * w))
        } else {
            theta / vn
        };
        let phi = v * scale;
        let theta2 = theta * theta;
        let c = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / theta2
        };
        let k = skew(&phi);
        let v_inv = Matrix3::identity() - k * 0.5 + k * k * c;
        Ok(Twist {
            tau: v_inv * self.translation,
            phi,
        })
    }

    /// Derivative of `exp(delta) * self` applied to `point`, with respect to `delta` at zero.
    ///
    /// Columns are ordered `(tau_x, tau_y, tau_z, phi_x, phi_y, phi_z)`: the translation
    /// block is the identity and the rotation block is `-[T p]x`.
    pub fn point_jacobian(&self, point: &Vector3<f64>) -> Matrix3x6<f64> {
        let moved = self.act(point);
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::identity());
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&moved)));
        j
    }

    /// Left update `exp(delta) * self`.
    pub fn retract(&self, delta: &Twist) -> RigidMotion {
        RigidMotion::exp(delta).compose(self)
    }
}

impl fmt::Display for RigidMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "q=[{:.6}, {:.6}, {:.6}, {:.6}] t=[{:.6}, {:.6}, {:.6}] mm",
            q.w, q.i, q.j, q.k, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

/// Per-object geodesic distance between an estimate and the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodesicError {
    /// Norm of the translation part of the log, in millimeters.
    pub tau_norm: f64,
    /// Norm of the Rodrigues vector of the log, in degrees.
    pub phi_norm: f64,
}

/// `log(ground_truth * estimate^-1)`, reported as (mm, degrees).
pub fn geodesic_error(estimate: &RigidMotion, ground_truth: &RigidMotion) -> Result<GeodesicError> {
    let twist = ground_truth.compose(&estimate.inverse()).log()?;
    Ok(GeodesicError {
        tau_norm: twist.tau.norm(),
        phi_norm: twist.phi.norm().to_degrees(),
    })
}

// Wire format: {"quaternion": [w, x, y, z], "translation_mm": [x, y, z]}, or on input
// a 4x4 homogeneous matrix, row-major, either flat or nested.

impl Serialize for RigidMotion {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let q = self.rotation.quaternion();
        let mut s = serializer.serialize_struct("RigidMotion", 2)?;
        s.serialize_field("quaternion", &[q.w, q.i, q.j, q.k])?;
        s.serialize_field(
            "translation_mm",
            &[self.translation.x, self.translation.y, self.translation.z],
        )?;
        s.end()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MotionRepr {
    Parts {
        quaternion: [f64; 4],
        translation_mm: [f64; 3],
    },
    Nested([[f64; 4]; 4]),
    Flat([f64; 16]),
}

impl<'de> Deserialize<'de> for RigidMotion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = MotionRepr::deserialize(deserializer).map_err(|_| {
            de::Error::custom(
                "expected {\"quaternion\": [w,x,y,z], \"translation_mm\": [x,y,z]} or a 4x4 row-major matrix",
            )
        })?;
        let motion = match repr {
            MotionRepr::Parts {
                quaternion: [w, x, y, z],
                translation_mm: [tx, ty, tz],
            } => {
                let q = Quaternion::new(w, x, y, z);
                if q.norm() == 0.0 {
                    return Err(de::Error::custom("zero quaternion"));
                }
                RigidMotion::from_parts(q, Vector3::new(tx, ty, tz))
            }
            MotionRepr::Nested(rows) => {
                RigidMotion::from_matrix(&Matrix4::from_fn(|r, c| rows[r][c]))
            }
            MotionRepr::Flat(v) => RigidMotion::from_matrix(&Matrix4::from_row_slice(&v)),
        };
        if !motion.is_finite() {
            return Err(de::Error::custom("non-finite motion"));
        }
        Ok(motion)
    }
}
