//! Pinhole projection between pixels and camera-frame points.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum depth (mm) in front of the camera for a projectable point.
pub const DEFAULT_Z_MIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
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

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.project_with_min(point, DEFAULT_Z_MIN)
    }

    pub fn project_with_min(&self, point: &Vector3<f64>, z_min: f64) -> Result<Vector2<f64>> {
        // Negated comparison also rejects NaN.
        if !(point.z > z_min) {
            return Err(Error::BehindCamera { z: point.z, z_min });
        }
        Ok(Vector2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    /// Derivative of [`Intrinsics::project`] with respect to the 3D point.
    pub fn project_jacobian(&self, point: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / point.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * point.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * point.y * iz2,
        )
    }

    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !is_valid_depth(depth) {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(Vector3::new(
            (pixel.x - self.cx) * depth / self.fx,
            (pixel.y - self.cy) * depth / self.fy,
            depth,
        ))
    }

    /// True when the continuous pixel lies within `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

/// Depth is valid when finite and strictly positive.
pub fn is_valid_depth(depth: f64) -> bool {
    depth.is_finite() && depth > 0.0
}
