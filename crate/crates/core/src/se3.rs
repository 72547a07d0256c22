//! Rigid camera poses and the se(3) exponential map.
//!
//! Poses map world coordinates into the camera frame: `p_cam = R·p_world + t`.
//! Tangent vectors are ordered `(ω, v)`: rotation first, then translation.
//! Increments are applied on the left, `T ← exp(τ^)·T`, and every pose gradient
//! in this crate is expressed in that convention.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

pub type Tangent = Vector6<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Camera placed at `center` with the given camera-to-world orientation.
    pub fn from_camera_center(cam_to_world: Matrix3<f64>, center: Vector3<f64>) -> Self {
        let rotation = cam_to_world.transpose();
        Self { rotation, translation: -(rotation * center) }
    }

    /// Camera at `eye` looking at `target`; image y axis points along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let cam_to_world = Matrix3::from_columns(&[x, y, z]);
        Self::from_camera_center(cam_to_world, eye)
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, rhs: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera-to-world orientation as a unit quaternion.
    pub fn orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation.transpose()))
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }

    /// Re-projects the rotation block onto SO(3).
    pub fn renormalized(&self) -> PoseSE3 {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 100, Rotation3::identity());
        PoseSE3 { rotation: rot.into_inner(), translation: self.translation }
    }

    /// Rotation angle (radians) and translation distance between two poses' camera frames.
    pub fn distance(&self, other: &PoseSE3) -> (f64, f64) {
        let rel = self.rotation * other.rotation.transpose();
        let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        (cos.acos(), (self.center() - other.center()).norm())
    }
}

/// Exponential map of `(ω, v)`.
pub fn se3_exp(tangent: &Tangent) -> PoseSE3 {
    let w = Vector3::new(tangent[0], tangent[1], tangent[2]);
    let v = Vector3::new(tangent[3], tangent[4], tangent[5]);
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&w);
    let k2 = k * k;
    let (a, b, c) = if theta < 1e-8 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let rotation = Matrix3::identity() + a * k + b * k2;
    let v_mat = Matrix3::identity() + b * k + c * k2;
    PoseSE3 { rotation, translation: v_mat * v }
}

/// Left-multiplicative update `exp(τ^)·T`.
pub fn pose_retract(pose: &PoseSE3, tangent: &Tangent) -> PoseSE3 {
    se3_exp(tangent).compose(pose)
}
