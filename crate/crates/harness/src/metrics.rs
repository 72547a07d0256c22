//! Trajectory and rendering metrics.

use gsflow_core::objectives::dssim_map;
use gsflow_core::{PoseSE3, RgbImage, ScalarMap};
use nalgebra::{Matrix3, Vector3};

use crate::error::{HarnessError, Result};

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Closed-form least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Sim3 {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if var_s > 0.0 { (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s } else { 1.0 };
    let translation = mu_d - scale * rotation * mu_s;
    Sim3 { scale, rotation, translation }
}

/// RMSE of camera-center residuals after Sim(3) alignment of `estimated` onto `ground_truth`.
pub fn ate_rmse(estimated: &[PoseSE3], ground_truth: &[PoseSE3]) -> Result<f64> {
    if estimated.len() != ground_truth.len() {
        return Err(HarnessError::Contract("trajectories differ in length".into()));
    }
    if estimated.len() < 3 {
        return Err(HarnessError::Contract("ATE needs at least 3 poses".into()));
    }
    let est: Vec<Vector3<f64>> = estimated.iter().map(|p| p.center()).collect();
    let gt: Vec<Vector3<f64>> = ground_truth.iter().map(|p| p.center()).collect();
    let sim = umeyama(&est, &gt);
    let sq: f64 = est.iter().zip(&gt).map(|(e, g)| (sim.apply(e) - g).norm_squared()).sum();
    Ok((sq / est.len() as f64).sqrt())
}

fn check_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(HarnessError::Contract("images differ in size".into()));
    }
    Ok(())
}

/// `−10·log10(MSE)` for images in `[0, 1]`; `+∞` for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / (3 * a.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean SSIM with the same window as the DSSIM loss, so `DSSIM = (1 − SSIM)/2`.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let d = dssim_map(a, b)?;
    Ok(1.0 - 2.0 * d.data().iter().sum::<f64>() / d.len() as f64)
}

/// Median and mean of `|d − d_gt| / d_gt` over pixels valid in both maps.
pub fn depth_abs_rel(est: &ScalarMap, gt: &ScalarMap, valid: impl Fn(usize) -> bool) -> Option<(f64, f64)> {
    let mut errs: Vec<f64> = (0..gt.len())
        .filter(|&j| valid(j) && gt[j] > 0.0 && est[j] > 0.0)
        .map(|j| (est[j] - gt[j]).abs() / gt[j])
        .collect();
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(f64::total_cmp);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Some((median_sorted(&errs), mean))
}

pub fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsflow_core::{se3_exp, Tangent};

    fn traj(n: usize) -> Vec<PoseSE3> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.3;
                se3_exp(&Tangent::new(0.1 * t.sin(), 0.05 * t, 0.0, t.cos(), 0.5 * t, (2.0 * t).sin()))
            })
            .collect()
    }

    #[test]
    fn identical_and_scaled_trajectories_align_perfectly() {
        let gt = traj(10);
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
        let scaled: Vec<PoseSE3> = gt
            .iter()
            .map(|p| PoseSE3::from_camera_center(p.rotation.transpose(), p.center() * 2.0))
            .collect();
        assert!(ate_rmse(&gt, &scaled).unwrap() < 1e-10);
        assert!(ate_rmse(&gt[..2], &gt[..2]).is_err());
    }

    #[test]
    fn psnr_and_ssim_basics() {
        let a = RgbImage::filled(16, 16, Vector3::repeat(0.5));
        let mut b = a.clone();
        for p in b.data_mut() {
            *p += Vector3::repeat(0.1);
        }
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
