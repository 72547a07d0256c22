use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::gaussian::{rotation_matrix, Gaussian3D};

/// Standard splatting split: two children with means drawn from `N(x, Σ)` and scales
/// divided by 1.6. Children are tagged with `keyframe_id`.
pub fn split_gaussian<R: Rng + ?Sized>(g: &Gaussian3D, rng: &mut R, keyframe_id: u32) -> (Gaussian3D, Gaussian3D) {
    let r = rotation_matrix(&g.rotation);
    let mut child = || {
        let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let mut c = g.clone();
        c.mean = g.mean + r * g.scale.component_mul(&z);
        c.scale = g.scale / 1.6;
        c.keyframe_id = keyframe_id;
        c
    };
    let a = child();
    let b = child();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Quaternion};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn parent(scale: Vector3<f64>) -> Gaussian3D {
        Gaussian3D::new(Vector3::new(1.0, -2.0, 3.0), Quaternion::new(0.8, 0.3, -0.2, 0.4), scale, 0.6, Vector3::zeros(), 2)
            .unwrap()
    }

    #[test]
    fn tiny_scale_keeps_children_at_parent() {
        let g = parent(Vector3::repeat(1e-12));
        let (a, b) = split_gaussian(&g, &mut ChaCha8Rng::seed_from_u64(1), 5);
        assert!((a.mean - g.mean).norm() < 1e-9 && (b.mean - g.mean).norm() < 1e-9);
        assert_eq!(a.keyframe_id, 5);
        assert_eq!(a.scale, g.scale / 1.6);
    }

    #[test]
    fn same_seed_same_children() {
        let g = parent(Vector3::new(0.3, 0.1, 0.2));
        let x = split_gaussian(&g, &mut ChaCha8Rng::seed_from_u64(9), 0);
        let y = split_gaussian(&g, &mut ChaCha8Rng::seed_from_u64(9), 0);
        assert_eq!(x, y);
    }

    #[test]
    fn child_means_follow_parent_covariance() {
        let g = parent(Vector3::new(0.3, 0.1, 0.2));
        let sigma = g.covariance().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        for _ in 0..10_000 {
            let (a, b) = split_gaussian(&g, &mut rng, 0);
            samples.push(a.mean - g.mean);
            samples.push(b.mean - g.mean);
        }
        let mean = samples.iter().sum::<Vector3<f64>>() / samples.len() as f64;
        let cov = samples.iter().map(|d| (d - mean) * (d - mean).transpose()).sum::<Matrix3<f64>>()
            / (samples.len() - 1) as f64;
        assert!((cov - sigma).norm() / sigma.norm() < 0.05);
    }
}
