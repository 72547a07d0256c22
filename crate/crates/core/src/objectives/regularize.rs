use nalgebra::Vector3;

use crate::splat::GaussianMap;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over Gaussians of `‖s − mean(s)·1‖₁` on the per-axis scales, and its
/// gradient with respect to the log-scales (subgradient 0 at ties).
pub fn iso_loss(map: &GaussianMap) -> (f64, Vec<Vector3<f64>>) {
    let n = map.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let grads = map
        .iter()
        .map(|g| {
            let s = g.scale;
            let m = s.sum() / 3.0;
            let sg = s.map(|v| sign(v - m));
            total += (s - Vector3::repeat(m)).abs().sum();
            let mean_sign = sg.sum() / 3.0;
            (sg - Vector3::repeat(mean_sign)).component_mul(&s) * inv_n
        })
        .collect();
    (total * inv_n, grads)
}

/// Mean binary entropy of the opacities, and its gradient with respect to the logits.
pub fn opacity_entropy_loss(map: &GaussianMap) -> (f64, Vec<f64>) {
    let n = map.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let grads = map
        .iter()
        .map(|g| {
            let o = g.opacity();
            let q = 1.0 - o;
            let xlogx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
            total -= xlogx(o) + xlogx(q);
            // dH/dℓ = o(1−o)·ln((1−o)/o) = −o(1−o)·ℓ
            -o * q * g.opacity_logit * inv_n
        })
        .collect();
    (total * inv_n, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian3D;
    use nalgebra::Quaternion;

    fn with_scale(s: Vector3<f64>, o: f64) -> Gaussian3D {
        Gaussian3D::new(Vector3::zeros(), Quaternion::identity(), s, o, Vector3::zeros(), 0).unwrap()
    }

    #[test]
    fn isotropic_gaussians_cost_nothing() {
        let map = GaussianMap::new(vec![with_scale(Vector3::repeat(0.3), 0.5), with_scale(Vector3::repeat(2.0), 0.5)]);
        let (l, g) = iso_loss(&map);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn elongated_example() {
        let map = GaussianMap::new(vec![with_scale(Vector3::new(2.0, 1.0, 1.0), 0.5)]);
        assert!((iso_loss(&map).0 - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iso_gradient_matches_finite_differences() {
        let mut map = GaussianMap::new(vec![
            with_scale(Vector3::new(2.0, 1.0, 0.5), 0.5),
            with_scale(Vector3::new(0.2, 0.7, 0.3), 0.5),
        ]);
        let (_, g) = iso_loss(&map);
        let h: f64 = 1e-7;
        for i in 0..2 {
            for k in 0..3 {
                let s0 = map.get(i).scale;
                map.gaussians_mut()[i].scale[k] = s0[k] * h.exp();
                let lp = iso_loss(&map).0;
                map.gaussians_mut()[i].scale[k] = s0[k] * (-h).exp();
                let lm = iso_loss(&map).0;
                map.gaussians_mut()[i].scale = s0;
                assert!(((lp - lm) / (2.0 * h) - g[i][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn entropy_values_and_gradient() {
        let map = GaussianMap::new(vec![with_scale(Vector3::repeat(1.0), 0.5)]);
        assert!((opacity_entropy_loss(&map).0 - 2f64.ln()).abs() < 1e-15);
        let map = GaussianMap::new(vec![with_scale(Vector3::repeat(1.0), 1.0 - 1e-9)]);
        assert!(opacity_entropy_loss(&map).0 < 1e-7);

        let mut map = GaussianMap::new(vec![with_scale(Vector3::repeat(1.0), 0.8), with_scale(Vector3::repeat(1.0), 0.1)]);
        let (_, g) = opacity_entropy_loss(&map);
        let h = 1e-6;
        for i in 0..2 {
            let l0 = map.get(i).opacity_logit;
            map.gaussians_mut()[i].opacity_logit = l0 + h;
            let lp = opacity_entropy_loss(&map).0;
            map.gaussians_mut()[i].opacity_logit = l0 - h;
            let lm = opacity_entropy_loss(&map).0;
            map.gaussians_mut()[i].opacity_logit = l0;
            assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-8);
        }
    }
}
