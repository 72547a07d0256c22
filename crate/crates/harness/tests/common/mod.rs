//! Brute-force per-pixel renderer: every pixel walks every Gaussian in depth order, with no
//! tiling, no shared projection code and no blend records.

use gsflow_core::se3::{se3_exp, Tangent};
use gsflow_core::{CameraIntrinsics, Gaussian3D, GaussianMap, PoseSE3};
use nalgebra::{Matrix2, Matrix3, SymmetricEigen, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Proj {
    pub mu: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
}

pub fn project(g: &Gaussian3D, pose: &PoseSE3, k: &CameraIntrinsics) -> Option<Proj> {
    let p = pose.rotation * g.mean + pose.translation;
    if p.z <= k.near {
        return None;
    }
    let r = UnitQuaternion::from_quaternion(g.rotation).to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov3 = pose.rotation * r * s2 * r.transpose() * pose.rotation.transpose();
    let j = nalgebra::Matrix2x3::new(
        k.fx / p.z,
        0.0,
        -k.fx * p.x / (p.z * p.z),
        0.0,
        k.fy / p.z,
        -k.fy * p.y / (p.z * p.z),
    );
    let mut cov = j * cov3 * j.transpose() + Matrix2::identity() * 0.3;
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    Some(Proj {
        mu: Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy),
        conic: cov.try_inverse()?,
        cov,
        depth: p.z,
    })
}

/// Rendered (depth in range, 3σ box overlapping the image).
fn visible(p: &Proj, k: &CameraIntrinsics) -> bool {
    let (hx, hy) = (3.0 * p.cov[(0, 0)].sqrt(), 3.0 * p.cov[(1, 1)].sqrt());
    p.depth < k.far
        && p.mu.x + hx >= 0.0
        && p.mu.x - hx <= k.width as f64 - 1.0
        && p.mu.y + hy >= 0.0
        && p.mu.y - hy <= k.height as f64 - 1.0
}

fn sqrtm(m: &Matrix2<f64>) -> Matrix2<f64> {
    let e = SymmetricEigen::new(*m);
    e.eigenvectors * Matrix2::from_diagonal(&e.eigenvalues.map(f64::sqrt)) * e.eigenvectors.transpose()
}

pub struct Reference {
    pub color: Vec<Vector3<f64>>,
    pub silhouette: Vec<f64>,
    pub flow: Vec<Vector2<f64>>,
    pub flow_valid: Vec<bool>,
}

pub fn render(map: &GaussianMap, pose: &PoseSE3, pose_next: &PoseSE3, k: &CameraIntrinsics) -> Reference {
    let projs: Vec<Option<Proj>> = map.iter().map(|g| project(g, pose, k).filter(|p| visible(p, k))).collect();
    let mut order: Vec<usize> = (0..map.len()).filter(|&i| projs[i].is_some()).collect();
    order.sort_by(|&a, &b| projs[a].as_ref().unwrap().depth.total_cmp(&projs[b].as_ref().unwrap().depth).then(a.cmp(&b)));
    let next: Vec<Option<(Vector2<f64>, Matrix2<f64>)>> = map
        .iter()
        .zip(&projs)
        .map(|(g, p)| {
            let p = p.as_ref()?;
            let q = project(g, pose_next, k)?;
            let m = sqrtm(&q.cov) * sqrtm(&p.cov).try_inverse()?;
            Some((q.mu, m))
        })
        .collect();

    let n = k.width * k.height;
    let mut out = Reference {
        color: vec![Vector3::zeros(); n],
        silhouette: vec![0.0; n],
        flow: vec![Vector2::zeros(); n],
        flow_valid: vec![false; n],
    };
    for j in 0..n {
        let pix = Vector2::new((j % k.width) as f64, (j / k.width) as f64);
        let mut t = 1.0;
        let mut ok = true;
        for &i in &order {
            let p = projs[i].as_ref().unwrap();
            let d = pix - p.mu;
            let alpha = map.get(i).opacity() * (-0.5 * (d.transpose() * p.conic * d)[0]).exp();
            if alpha < 1.0 / 255.0 {
                continue;
            }
            let alpha = alpha.min(0.99);
            if t * (1.0 - alpha) < 1e-4 {
                break;
            }
            let w = alpha * t;
            out.color[j] += map.get(i).color * w;
            out.silhouette[j] += w;
            match next[i] {
                Some((mu_next, m)) => out.flow[j] += w * (m * d + mu_next - pix),
                None => ok = false,
            }
            t *= 1.0 - alpha;
        }
        out.flow_valid[j] = ok && out.silhouette[j] > 1e-2;
    }
    out
}

pub struct RandomScene {
    pub map: GaussianMap,
    pub pose: PoseSE3,
    pub pose_next: PoseSE3,
    pub k: CameraIntrinsics,
}

/// Anisotropic Gaussians with random orientation, size, opacity and color in front of a
/// camera near the origin, plus a second camera a small motion away.
pub fn random_scene(seed: u64, n: usize, size: usize) -> RandomScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::simple(size, size, size as f64);
    let gaussians = (0..n)
        .map(|_| {
            let z = rng.random_range(2.0..8.0);
            let mean = Vector3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z);
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let q = UnitQuaternion::from_scaled_axis(axis * 1.5).into_inner();
            let scale = Vector3::from_fn(|_, _| (rng.random_range(-4.0f64..-1.0)).exp());
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            Gaussian3D::new(mean, q, scale, rng.random_range(0.05..0.99), color, 0).unwrap()
        })
        .collect();
    let mut small = |r: f64, t: f64| {
        Tangent::new(
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-t..t),
            rng.random_range(-t..t),
            rng.random_range(-t..t),
        )
    };
    let pose = se3_exp(&small(0.05, 0.2));
    let pose_next = gsflow_core::pose_retract(&pose, &small(0.05, 0.3));
    RandomScene { map: GaussianMap::new(gaussians), pose, pose_next, k }
}
