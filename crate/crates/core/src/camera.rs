use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::grid::RgbImage;
use crate::se3::PoseSE3;

/// Calibrated pinhole camera. Pixel `(x, y)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    /// Square pixels, principal point at the image center.
    pub fn simple(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
            near: 0.01,
            far: 1e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidParameter("require 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("empty image".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy)
    }

    /// Camera-frame point at z-depth `depth` seen through `pixel`.
    #[inline]
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx * depth, (pixel.y - self.cy) / self.fy * depth, depth)
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u32,
    pub image: RgbImage,
    pub pose: PoseSE3,
    pub intrinsics: CameraIntrinsics,
}

impl Keyframe {
    pub fn new(id: u32, image: RgbImage, pose: PoseSE3, intrinsics: CameraIntrinsics) -> Result<Self> {
        if image.width() != intrinsics.width || image.height() != intrinsics.height {
            return Err(Error::InvalidParameter("image size does not match intrinsics".into()));
        }
        if image.data().iter().any(|c| c.iter().any(|&v| !(0.0..=1.0).contains(&v))) {
            return Err(Error::InvalidParameter("image values must lie in [0,1]".into()));
        }
        Ok(Self { id, image, pose, intrinsics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_unproject_round_trip() {
        let k = CameraIntrinsics::simple(64, 48, 50.0);
        let p = Vector3::new(0.3, -0.2, 2.5);
        let px = k.project(&p);
        assert!((k.unproject(&px, 2.5) - p).norm() < 1e-14);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        let mut k = CameraIntrinsics::simple(8, 8, 10.0);
        k.near = 2.0;
        k.far = 1.0;
        assert!(k.validate().is_err());
    }
}
