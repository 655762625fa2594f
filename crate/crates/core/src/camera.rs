//! Camera poses and pinhole intrinsics.
//!
//! Camera frame convention: x right, y up, the camera looks down -z.

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use serde::{Deserialize, Serialize};

/// A camera pose given as position, look-at target and an up hint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
}

impl Viewpoint {
    pub fn new(position: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let v = Self {
            position,
            target,
            up,
        };
        v.validate()?;
        Ok(v)
    }

    /// Look at `target` choosing world +y as up unless the view axis is
    /// nearly vertical, in which case +z is used.
    pub fn looking_at(position: Vec3, target: Vec3) -> Result<Self> {
        let f = (target - position).normalized();
        let up = if f.dot(Vec3::Y).abs() > 0.999 {
            Vec3::Z
        } else {
            Vec3::Y
        };
        Self::new(position, target, up)
    }

    pub fn validate(&self) -> Result<()> {
        let axis = self.target - self.position;
        if !(self.position.is_finite() && self.target.is_finite() && self.up.is_finite()) {
            return Err(Error::InvalidViewpoint("non-finite component".into()));
        }
        if axis.norm() < 1e-12 {
            return Err(Error::InvalidViewpoint("position equals target".into()));
        }
        let up = self.up.normalized();
        if up.norm() < 0.5 || axis.normalized().cross(up).norm() < 1e-9 {
            return Err(Error::InvalidViewpoint(
                "up vector parallel to viewing axis".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vec3 {
        (self.target - self.position).normalized()
    }

    /// Camera-to-world rotation with columns (right, up, -forward).
    pub fn rotation(&self) -> Mat3 {
        let f = self.forward();
        let r = f.cross(self.up).normalized();
        let u = r.cross(f);
        Mat3::from_columns(r, u, -f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, vertical_fov: f64) -> Result<Self> {
        let c = Self {
            width,
            height,
            vertical_fov,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidConfig("image dimensions must be >= 1".into()));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::InvalidConfig("vertical_fov must be in (0, pi)".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit ray direction in the camera frame through sub-pixel position
    /// (`px + ox`, `py + oy`), where (0.5, 0.5) is the pixel center.
    pub fn camera_direction(&self, px: usize, py: usize, ox: f64, oy: f64) -> Vec3 {
        let tan_half = (0.5 * self.vertical_fov).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = (2.0 * (px as f64 + ox) / self.width as f64 - 1.0) * tan_half * aspect;
        let y = (1.0 - 2.0 * (py as f64 + oy) / self.height as f64) * tan_half;
        Vec3::new(x, y, -1.0).normalized()
    }
}

/// World-space unit direction through a pixel.
pub fn world_direction(
    view: &Viewpoint,
    intrinsics: &CameraIntrinsics,
    px: usize,
    py: usize,
    offset: (f64, f64),
) -> Vec3 {
    view.rotation()
        .mul_vec(intrinsics.camera_direction(px, py, offset.0, offset.1))
        .normalized()
}
