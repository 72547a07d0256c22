//! Geometry-derived optical flow standing in for a learned flow network.

use gsflow_core::splat::DEPTH_SILHOUETTE_MIN;
use gsflow_core::{rasterize, CameraIntrinsics, FlowField, GaussianMap, PoseSE3, RenderOutputs};
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative depth disagreement above which a reprojected pixel counts as occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowNoise {
    /// Additive Gaussian noise per flow component (px).
    pub sigma: f64,
    /// Probability of a pixel's confidence being dropped to 0.
    pub dropout: f64,
}

/// Flow from frame `a` to frame `b` using the ground-truth renders of both frames:
/// back-project through the depth at `a`, reproject into `b`. Pixels without depth are
/// invalid; occluded or dropped pixels keep their flow with confidence 0.
pub fn flow_oracle_from_renders<R: Rng + ?Sized>(
    render_a: &RenderOutputs,
    render_b: &RenderOutputs,
    noise: &FlowNoise,
    rng: &mut R,
) -> FlowField {
    let k = &render_a.intrinsics;
    let (w, h) = (k.width, k.height);
    let (pose_a, pose_b) = (&render_a.pose, &render_b.pose);
    let a_to_b = pose_b.compose(&pose_a.inverse());
    let mut out = FlowField::zeros(w, h);
    for j in 0..w * h {
        let pix = Vector2::new((j % w) as f64, (j / w) as f64);
        let mut n = Vector2::zeros();
        if noise.sigma > 0.0 {
            n = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * noise.sigma;
        }
        let dropped = noise.dropout > 0.0 && rng.random::<f64>() < noise.dropout;
        if render_a.silhouette[j] <= DEPTH_SILHOUETTE_MIN {
            continue;
        }
        let p_b = a_to_b.transform(&k.unproject(&pix, render_a.depth[j]));
        if p_b.z <= k.near {
            continue;
        }
        let q = k.project(&p_b);
        out.flow[j] = q - pix + n;
        out.valid[j] = true;
        let mut conf = if dropped { 0.0 } else { 1.0 };
        let (u, v) = (q.x.round(), q.y.round());
        if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
            let jb = v as usize * w + u as usize;
            let db = render_b.depth[jb];
            if render_b.silhouette[jb] > DEPTH_SILHOUETTE_MIN && (p_b.z - db).abs() > OCCLUSION_TOLERANCE * db {
                conf = 0.0;
            }
        }
        out.confidence[j] = conf;
    }
    out
}

/// Renders both frames of the ground-truth map and returns the oracle flow from `a` to `b`.
pub fn flow_oracle<R: Rng + ?Sized>(
    gt: &GaussianMap,
    pose_a: &PoseSE3,
    pose_b: &PoseSE3,
    k: &CameraIntrinsics,
    noise: &FlowNoise,
    rng: &mut R,
) -> FlowField {
    let ra = rasterize(gt, pose_a, k);
    let rb = rasterize(gt, pose_b, k);
    flow_oracle_from_renders(&ra, &rb, noise, rng)
}

/// Midpoint triangulation of pixel `pix` in frame `a` matched to `pix + flow` in frame `b`.
/// Returns the z-depth in frame `a`, or `None` for near-parallel rays or points behind a camera.
pub fn triangulate_depth(
    pix: &Vector2<f64>,
    flow: &Vector2<f64>,
    pose_a: &PoseSE3,
    pose_b: &PoseSE3,
    k: &CameraIntrinsics,
) -> Option<f64> {
    let ray = |p: &Vector2<f64>, pose: &PoseSE3| -> (Vector3<f64>, Vector3<f64>) {
        let d = k.unproject(p, 1.0);
        (pose.center(), (pose.rotation.transpose() * d).normalize())
    };
    let (c1, d1) = ray(pix, pose_a);
    let (c2, d2) = ray(&(pix + flow), pose_b);
    let b = d1.dot(&d2);
    let m = Matrix2::new(1.0, -b, b, -1.0);
    let w = c2 - c1;
    let rhs = Vector2::new(d1.dot(&w), d2.dot(&w));
    let det = m.determinant();
    if det.abs() < 1e-9 {
        return None;
    }
    let st = m.try_inverse()? * rhs;
    if st.x <= 0.0 || st.y <= 0.0 {
        return None;
    }
    let mid = 0.5 * ((c1 + d1 * st.x) + (c2 + d2 * st.y));
    let z = pose_a.transform(&mid).z;
    (z > k.near).then_some(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsflow_core::se3_exp;
    use gsflow_core::Tangent;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn identical_poses_give_zero_flow() {
        let s = generate_scene(&SceneSpec { n_frames: 2, seed: 3, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = flow_oracle_from_renders(&s.renders[0], &s.renders[0], &FlowNoise::default(), &mut rng);
        for j in 0..f.flow.len() {
            if f.valid[j] {
                assert!(f.flow[j].norm() < 1e-9);
                assert_eq!(f.confidence[j], 1.0);
            }
        }
    }

    #[test]
    fn triangulation_recovers_depth() {
        let k = CameraIntrinsics::simple(64, 48, 60.0);
        let a = se3_exp(&Tangent::new(0.01, 0.02, 0.0, 0.1, 0.0, 0.0));
        let b = se3_exp(&Tangent::new(-0.02, 0.0, 0.01, -0.2, 0.05, 0.1));
        let x = Vector3::new(0.3, -0.2, 4.0);
        let pa = k.project(&a.transform(&x));
        let pb = k.project(&b.transform(&x));
        let z = triangulate_depth(&pa, &(pb - pa), &a, &b, &k).unwrap();
        assert!((z - a.transform(&x).z).abs() < 1e-9);
    }
}
