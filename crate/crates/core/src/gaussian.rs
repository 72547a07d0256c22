//! Anisotropic 3D Gaussian primitives and their covariance factorization.
//!
//! A Gaussian stores its scale as per-axis standard deviations and its
//! opacity through a logit, so the optimizer can work on `ln(scale)` and
//! `logit(opacity)` without ever leaving the valid domain.

use nalgebra::{Matrix3, Quaternion, Vector3, Vector4};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    /// Unit quaternion, `(w, i, j, k)`.
    pub rotation: Quaternion<f64>,
    /// Per-axis standard deviations (world units).
    pub scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// Linear RGB in `[0, 1]`.
    pub color: Vector3<f64>,
    /// Keyframe that first rasterized this Gaussian.
    pub keyframe_id: u32,
}

impl Gaussian3D {
    pub fn new(
        mean: Vector3<f64>,
        rotation: Quaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
        keyframe_id: u32,
    ) -> Result<Self> {
        let g = Self {
            mean,
            rotation: rotation.normalize(),
            scale,
            opacity_logit: logit(opacity),
            color,
            keyframe_id,
        };
        g.validate()?;
        Ok(g)
    }

    /// Isotropic Gaussian with identity rotation.
    pub fn isotropic(mean: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Result<Self> {
        Self::new(mean, Quaternion::identity(), Vector3::repeat(sigma), opacity, color, 0)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn set_opacity(&mut self, opacity: f64) {
        self.opacity_logit = logit(opacity);
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance3d(&self.rotation, &self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.mean.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite();
        if !finite {
            return Err(Error::InvalidParameter("non-finite Gaussian field".into()));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("quaternion norm {}", self.rotation.norm())));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidParameter("scale must be positive".into()));
        }
        let o = self.opacity();
        if !(o > 0.0 && o < 1.0) {
            return Err(Error::InvalidParameter(format!("opacity {o} outside (0,1)")));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of `q / |q|`.
pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let q = q.normalize();
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (possibly unnormalized) quaternion, `(w, i, j, k)` order.
pub fn rotation_matrix_vjp(q: &Quaternion<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let u = q.normalize();
    let (w, x, y, z) = (u.w, u.i, u.j, u.k);
    let g = d_rot;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let d_unit = Vector4::new(dw, dx, dy, dz);
    let unit = Vector4::new(w, x, y, z);
    (d_unit - unit * unit.dot(&d_unit)) / norm
}

/// `Σ = R·diag(scale²)·Rᵀ`, symmetrized exactly.
pub fn covariance3d(rotation: &Quaternion<f64>, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !rotation.coords.iter().chain(scale.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite rotation or scale".into()));
    }
    if rotation.norm() == 0.0 {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    let r = rotation_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    let cov = m * m.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

/// Pulls `dL/dΣ` (full symmetric matrix convention) back to the raw quaternion and the
/// per-axis standard deviations.
pub fn covariance3d_vjp(
    rotation: &Quaternion<f64>,
    scale: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Vector4<f64>, Vector3<f64>) {
    let r = rotation_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    let g = (d_cov + d_cov.transpose()) * 0.5;
    let d_m = 2.0 * g * m;
    let mut d_scale = Vector3::zeros();
    for k in 0..3 {
        d_scale[k] = (0..3).map(|a| d_m[(a, k)] * r[(a, k)]).sum();
    }
    let d_r = d_m * Matrix3::from_diagonal(scale);
    (rotation_matrix_vjp(rotation, &d_r), d_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_covariances() {
        let q = Quaternion::identity();
        let c = covariance3d(&q, &Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(c, Matrix3::identity());
        let c = covariance3d(&q, &Vector3::new(2.0, 1.0, 1.0)).unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn non_finite_is_rejected() {
        let q = Quaternion::identity();
        assert!(covariance3d(&q, &Vector3::new(f64::NAN, 1.0, 1.0)).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let q = Quaternion::new(0.9, 0.2, -0.3, 0.1);
        let s = Vector3::new(0.7, 1.3, 0.4);
        let probe = Matrix3::new(0.3, -0.2, 0.5, 0.1, 0.9, -0.4, 0.7, 0.2, -0.6);
        let loss = |q: &Quaternion<f64>, s: &Vector3<f64>| {
            covariance3d(q, s).unwrap().component_mul(&probe).sum()
        };
        let (dq, ds) = covariance3d_vjp(&q, &s, &probe);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp.coords[(k + 3) % 4] += h;
            qm.coords[(k + 3) % 4] -= h;
            let num = (loss(&qp, &s) - loss(&qm, &s)) / (2.0 * h);
            assert!((num - dq[k]).abs() < 1e-7, "quat {k}: {num} vs {}", dq[k]);
        }
        for k in 0..3 {
            let mut sp = s;
            let mut sm = s;
            sp[k] += h;
            sm[k] -= h;
            let num = (loss(&q, &sp) - loss(&q, &sm)) / (2.0 * h);
            assert!((num - ds[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn opacity_round_trips_through_logit() {
        let g = Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.3, Vector3::zeros()).unwrap();
        assert!((g.opacity() - 0.3).abs() < 1e-15);
        assert!(Gaussian3D::isotropic(Vector3::zeros(), -1.0, 0.3, Vector3::zeros()).is_err());
    }
}
