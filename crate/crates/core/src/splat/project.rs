use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::CameraIntrinsics;
use crate::gaussian::Gaussian3D;
use crate::se3::PoseSE3;
use crate::symmat2::{eigendecompose, EigenDecomp2, SymMat2};

/// Isotropic screen-space dilation added to every projected covariance (px²).
pub const LOW_PASS_DILATION: f64 = 0.3;

/// A Gaussian projected into one camera, with everything the backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D {
    pub mu: Vector2<f64>,
    /// `J·W·Σ·Wᵀ·Jᵀ + 0.3·I`.
    pub sigma2d: SymMat2,
    pub conic: SymMat2,
    /// Camera-frame z.
    pub depth: f64,
    /// `3·√λ₁` in pixels.
    pub radius: f64,
    /// Axis-aligned half extents of the region where α can reach 1/255.
    pub extent: Vector2<f64>,
    pub decomp: EigenDecomp2,
    pub p_cam: Vector3<f64>,
    /// Perspective Jacobian `∂μ/∂p_cam`.
    pub jacobian: Matrix2x3<f64>,
    /// World-to-camera rotation used for the projection.
    pub rotation: Matrix3<f64>,
    /// Camera-frame 3D covariance `W·Σ·Wᵀ`.
    pub cov_cam: Matrix3<f64>,
    pub opacity: f64,
}

impl Projected2D {
    /// Whether the 3σ box around the center overlaps the image.
    pub fn touches_image(&self, k: &CameraIntrinsics) -> bool {
        let hx = 3.0 * self.sigma2d.a.sqrt();
        let hy = 3.0 * self.sigma2d.c.sqrt();
        self.mu.x + hx >= 0.0
            && self.mu.x - hx <= (k.width as f64 - 1.0)
            && self.mu.y + hy >= 0.0
            && self.mu.y - hy <= (k.height as f64 - 1.0)
    }
}

/// Projects without image-bounds culling. Returns `None` only when the mean is not
/// in front of the near plane.
pub fn project_unculled(g: &Gaussian3D, pose: &PoseSE3, k: &CameraIntrinsics) -> Option<Projected2D> {
    let p_cam = pose.transform(&g.mean);
    let z = p_cam.z;
    if !(z > k.near) {
        return None;
    }
    let (x, y) = (p_cam.x, p_cam.y);
    let iz = 1.0 / z;
    let jacobian = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * x * iz * iz, 0.0, k.fy * iz, -k.fy * y * iz * iz);
    let cov = g.covariance().ok()?;
    let w = pose.rotation;
    let cov_cam = w * cov * w.transpose();
    let s = jacobian * cov_cam * jacobian.transpose();
    let sigma2d = SymMat2::new(
        s[(0, 0)] + LOW_PASS_DILATION,
        0.5 * (s[(0, 1)] + s[(1, 0)]),
        s[(1, 1)] + LOW_PASS_DILATION,
    );
    let decomp = eigendecompose(&sigma2d).ok()?;
    let conic = sigma2d.inverse()?;
    let opacity = g.opacity();
    let cutoff = if opacity * 255.0 > 1.0 { 2.0 * (255.0 * opacity).ln() } else { 0.0 };
    Some(Projected2D {
        mu: k.project(&p_cam),
        sigma2d,
        conic,
        depth: z,
        radius: 3.0 * decomp.s[0].sqrt(),
        extent: Vector2::new((cutoff * sigma2d.a).sqrt(), (cutoff * sigma2d.c).sqrt()),
        decomp,
        p_cam,
        jacobian,
        rotation: w,
        cov_cam,
        opacity,
    })
}

/// Projects for rendering: culled (`None`) when the depth is outside `(near, far)` or the
/// 3σ ellipse misses the image.
pub fn project_gaussian(g: &Gaussian3D, pose: &PoseSE3, k: &CameraIntrinsics) -> Option<Projected2D> {
    let p = project_unculled(g, pose, k)?;
    if !(p.depth < k.far) || !p.touches_image(k) {
        return None;
    }
    Some(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{se3_exp, Tangent};

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 40.0, fy: 50.0, cx: 16.0, cy: 12.0, width: 32, height: 24, near: 0.1, far: 100.0 }
    }

    #[test]
    fn on_axis_isotropic_projection() {
        let k = intrinsics();
        let (z, sigma) = (4.0, 0.2);
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, z), sigma, 0.5, Vector3::zeros()).unwrap();
        let p = project_gaussian(&g, &PoseSE3::identity(), &k).unwrap();
        assert_eq!(p.mu, Vector2::new(16.0, 12.0));
        let ex = (k.fx * sigma / z).powi(2) + 0.3;
        let ey = (k.fy * sigma / z).powi(2) + 0.3;
        assert!((p.sigma2d.a - ex).abs() < 1e-12);
        assert!((p.sigma2d.c - ey).abs() < 1e-12);
        assert!(p.sigma2d.b.abs() < 1e-15);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.2, 0.5, Vector3::zeros()).unwrap();
        assert!(project_gaussian(&g, &PoseSE3::identity(), &intrinsics()).is_none());
        assert!(project_unculled(&g, &PoseSE3::identity(), &intrinsics()).is_none());
    }

    #[test]
    fn off_image_is_culled_only_by_the_culling_variant() {
        let g = Gaussian3D::isotropic(Vector3::new(30.0, 0.0, 2.0), 0.1, 0.5, Vector3::zeros()).unwrap();
        assert!(project_gaussian(&g, &PoseSE3::identity(), &intrinsics()).is_none());
        assert!(project_unculled(&g, &PoseSE3::identity(), &intrinsics()).is_some());
    }

    #[test]
    fn shared_world_translation_is_invisible() {
        let k = intrinsics();
        let pose = se3_exp(&Tangent::new(0.1, -0.05, 0.2, 0.3, 0.1, -0.2));
        let mut g = Gaussian3D::new(
            Vector3::new(0.2, -0.1, 3.0),
            nalgebra::Quaternion::new(0.9, 0.1, 0.3, -0.2),
            Vector3::new(0.3, 0.1, 0.2),
            0.6,
            Vector3::zeros(),
            0,
        )
        .unwrap();
        let before = project_gaussian(&g, &pose, &k).unwrap();
        let shift = Vector3::new(1.5, -0.7, 2.0);
        g.mean += shift;
        let moved = PoseSE3::from_camera_center(pose.rotation.transpose(), pose.center() + shift);
        let after = project_gaussian(&g, &moved, &k).unwrap();
        assert!((before.mu - after.mu).norm() < 1e-12);
        assert!((before.sigma2d.to_matrix() - after.sigma2d.to_matrix()).norm() < 1e-12);
    }
}
