use nalgebra::Vector3;

use crate::error::{contract, Result};
use crate::grid::{RgbImage, ScalarMap};
use crate::numeric::pairwise_sum;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone)]
pub struct LossMaps {
    /// Per-pixel DSSIM averaged over channels, in `[0, 1]`.
    pub dssim_map: ScalarMap,
    /// Per-pixel L1 averaged over channels.
    pub l1_map: ScalarMap,
}

#[derive(Debug, Clone)]
pub struct ImageLossOutput {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub maps: LossMaps,
    pub dl_dpixel: RgbImage,
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable zero-padded filtering with the normalized SSIM window. The window is
/// symmetric, so this operator is self-adjoint.
fn blur(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += wk * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += wk * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel SSIM of one channel and, when `upstream` is given, `Σ_p upstream_p·∂SSIM_p/∂x`.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, upstream: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
    let win = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (blur(x, w, h, &win), blur(y, w, h, &win));
    let (exx, eyy, exy) = (blur(&xx, w, h, &win), blur(&yy, w, h, &win), blur(&xy, w, h, &win));
    let n = w * h;
    let mut ssim = vec![0.0; n];
    let mut g_mu = vec![0.0; n];
    let mut g_xx = vec![0.0; n];
    let mut g_xy = vec![0.0; n];
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * (exy[p] - ux * uy) + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        ssim[p] = s;
        if let Some(u) = upstream {
            let u = u[p];
            g_mu[p] = u * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            g_xx[p] = -u * s / b2;
            g_xy[p] = 2.0 * u * s / a2;
        }
    }
    let grad = upstream.map(|_| {
        let (bm, bxx, bxy) = (blur(&g_mu, w, h, &win), blur(&g_xx, w, h, &win), blur(&g_xy, w, h, &win));
        (0..n).map(|q| bm[q] + 2.0 * x[q] * bxx[q] + y[q] * bxy[q]).collect()
    });
    (ssim, grad)
}

fn channel(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data().iter().map(|v| v[c]).collect()
}

/// Per-pixel DSSIM `(1 − SSIM)/2` averaged over channels.
pub fn dssim_map(a: &RgbImage, b: &RgbImage) -> Result<ScalarMap> {
    if !a.same_shape(b) {
        return Err(contract("images differ in size"));
    }
    let (w, h) = (a.width(), a.height());
    let mut out = ScalarMap::filled(w, h, 0.0);
    for c in 0..3 {
        let (s, _) = ssim_channel(&channel(a, c), &channel(b, c), w, h, None);
        for (o, v) in out.data_mut().iter_mut().zip(s) {
            *o += (1.0 - v) / 6.0;
        }
    }
    Ok(out)
}

/// `(1 − λ)·mean(L1) + λ·mean(DSSIM)` of `rendered` against `target`, with its exact
/// gradient with respect to `rendered`.
pub fn image_loss(rendered: &RgbImage, target: &RgbImage, lambda_dssim: f64) -> Result<ImageLossOutput> {
    if !rendered.same_shape(target) {
        return Err(contract(format!(
            "rendered {}x{} vs target {}x{}",
            rendered.width(),
            rendered.height(),
            target.width(),
            target.height()
        )));
    }
    let (w, h) = (rendered.width(), rendered.height());
    let n = w * h;
    let inv_n = 1.0 / n as f64;
    let mut grad = RgbImage::filled(w, h, Vector3::zeros());
    let mut l1_map = ScalarMap::filled(w, h, 0.0);
    for j in 0..n {
        let d = rendered[j] - target[j];
        l1_map[j] = d.abs().sum() / 3.0;
        grad[j] = d.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }) * ((1.0 - lambda_dssim) * inv_n / 3.0);
    }
    let mut dssim = ScalarMap::filled(w, h, 0.0);
    // ∂L/∂SSIM_p = −λ / (2·3·n)
    let upstream = vec![-lambda_dssim * inv_n / 6.0; n];
    for c in 0..3 {
        let (s, g) = ssim_channel(&channel(rendered, c), &channel(target, c), w, h, Some(&upstream));
        for (o, v) in dssim.data_mut().iter_mut().zip(&s) {
            *o += (1.0 - v) / 6.0;
        }
        for (j, gv) in g.unwrap().into_iter().enumerate() {
            grad[j][c] += gv;
        }
    }
    let l1 = pairwise_sum(l1_map.data()) * inv_n;
    let ds = pairwise_sum(dssim.data()) * inv_n;
    Ok(ImageLossOutput {
        total: (1.0 - lambda_dssim) * l1 + lambda_dssim * ds,
        l1,
        dssim: ds,
        maps: LossMaps { dssim_map: dssim, l1_map },
        dl_dpixel: grad,
    })
}
