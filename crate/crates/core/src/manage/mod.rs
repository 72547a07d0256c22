//! Per-Gaussian error statistics, densification and pruning masks, and map edits.

mod split;

pub use split::split_gaussian;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ManagementConfig;
use crate::error::{contract, Result};
use crate::grid::ScalarMap;
use crate::splat::{GaussianMap, RenderOutputs};

/// Density contributions at or below this leave the normalized errors undefined.
pub const DENSITY_MIN: f64 = 1e-8;

/// `E_i = Σ_j w_ij·loss(j)` over the blend records of `render`, reduced per tile in a
/// fixed order.
pub fn gaussian_error(render: &RenderOutputs, loss_map: &ScalarMap) -> Result<Vec<f64>> {
    let (w, h) = (render.intrinsics.width, render.intrinsics.height);
    if loss_map.width() != w || loss_map.height() != h {
        return Err(contract(format!("loss map {}x{} vs render {w}x{h}", loss_map.width(), loss_map.height())));
    }
    let per_tile: Vec<Vec<f64>> = render
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![0.0; list.len()];
            for j in render.tile_pixels(t) {
                let v = loss_map[j];
                for e in render.records.pixel(j) {
                    acc[e.slot as usize] += e.weight * v;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; render.projections.len()];
    for (t, list) in render.tiles.iter().enumerate() {
        for (slot, &gi) in list.iter().enumerate() {
            out[gi as usize] += per_tile[t][slot];
        }
    }
    Ok(out)
}

/// `Ê_i = E_i / D_i`, `None` where `D_i ≤ 1e-8`.
pub fn normalized_error(e: &[f64], d: &[f64]) -> Vec<Option<f64>> {
    e.iter().zip(d).map(|(&e, &d)| if d > DENSITY_MIN { Some(e / d) } else { None }).collect()
}

/// Per-Gaussian statistics of one rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianErrorStats {
    pub generation: u64,
    pub e_dssim: Vec<f64>,
    pub e_flow: Vec<f64>,
    /// Density contribution `E[ℋ]`.
    pub density: Vec<f64>,
    pub en_dssim: Vec<Option<f64>>,
    pub en_flow: Vec<Option<f64>>,
    /// `3·√λ₁` of the projected covariance in pixels, 0 when culled.
    pub radius: Vec<f64>,
    pub pos_grad: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl GaussianErrorStats {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    /// Gathers statistics for the frame of `render`. `flow_map` is the confidence-weighted
    /// flow loss map; without one the flow errors are zero. `pos_grad` holds the screen-space
    /// position gradient magnitude per Gaussian.
    pub fn compute(
        map: &GaussianMap,
        render: &RenderOutputs,
        dssim_map: &ScalarMap,
        flow_map: Option<&ScalarMap>,
        pos_grad: &[f64],
    ) -> Result<Self> {
        if render.generation != map.generation() || render.projections.len() != map.len() {
            return Err(contract("render is stale with respect to the map"));
        }
        if pos_grad.len() != map.len() {
            return Err(contract("position gradients do not match the map"));
        }
        let e_dssim = gaussian_error(render, dssim_map)?;
        let e_flow = match flow_map {
            Some(f) => gaussian_error(render, f)?,
            None => vec![0.0; map.len()],
        };
        let density = gaussian_error(render, &render.silhouette)?;
        Ok(Self {
            generation: map.generation(),
            en_dssim: normalized_error(&e_dssim, &density),
            en_flow: normalized_error(&e_flow, &density),
            e_dssim,
            e_flow,
            density,
            radius: render.projections.iter().map(|p| p.as_ref().map_or(0.0, |p| p.radius)).collect(),
            pos_grad: pos_grad.to_vec(),
            opacity: map.iter().map(|g| g.opacity()).collect(),
        })
    }
}

pub const M1: u8 = 1;
pub const M2: u8 = 2;
pub const M3: u8 = 4;
pub const M4: u8 = 1;
pub const M5: u8 = 2;
pub const M6: u8 = 4;

/// Mask membership per Gaussian as bit sets: densify uses `M1 | M2 | M3`, prune uses
/// `M4 | M5 | M6`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManagementMasks {
    pub generation: u64,
    pub densify: Vec<u8>,
    pub prune: Vec<u8>,
}

fn above(v: Option<f64>, threshold: f64) -> bool {
    v.is_some_and(|v| v > threshold)
}

pub fn densify_masks(stats: &GaussianErrorStats, cfg: &ManagementConfig) -> Vec<u8> {
    (0..stats.len())
        .map(|i| {
            let r = stats.radius[i];
            let mut tag = 0;
            if stats.e_dssim[i] > cfg.eta_s1 && r > cfg.eta_r1 && stats.pos_grad[i] < cfg.eta_g1 {
                tag |= M1;
            }
            if above(stats.en_dssim[i], cfg.eta_s2) && r > cfg.eta_r1 {
                tag |= M2;
            }
            if r > cfg.eta_r2 {
                tag |= M3;
            }
            tag
        })
        .collect()
}

pub fn prune_masks(stats: &GaussianErrorStats, cfg: &ManagementConfig) -> Vec<u8> {
    (0..stats.len())
        .map(|i| {
            let r = stats.radius[i];
            let mut tag = 0;
            if (above(stats.en_dssim[i], cfg.eta_p1) || above(stats.en_flow[i], cfg.eta_p2)) && r < cfg.eta_r3 {
                tag |= M4;
            }
            if above(stats.en_dssim[i], cfg.eta_p3) && r < cfg.eta_r4 {
                tag |= M5;
            }
            if stats.opacity[i] < cfg.eta_o1 {
                tag |= M6;
            }
            tag
        })
        .collect()
}

pub fn compute_masks(stats: &GaussianErrorStats, cfg: &ManagementConfig) -> ManagementMasks {
    ManagementMasks { generation: stats.generation, densify: densify_masks(stats, cfg), prune: prune_masks(stats, cfg) }
}

/// Outcome of one management event.
#[derive(Debug, Clone, PartialEq)]
pub struct ManagementReport {
    pub keyframe_id: u32,
    pub size_before: usize,
    pub size_after: usize,
    pub m1: usize,
    pub m2: usize,
    pub m3: usize,
    pub m4: usize,
    pub m5: usize,
    pub m6: usize,
    pub pruned: usize,
    pub split: usize,
    /// For each Gaussian of the edited map, its index before the edit; `None` for split children.
    pub origin: Vec<Option<usize>>,
}

impl ManagementReport {
    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"keyframe_id\":{},\"size_before\":{},\"size_after\":{},\"m1\":{},\"m2\":{},\"m3\":{},\"m4\":{},\"m5\":{},\"m6\":{},\"pruned\":{},\"split\":{}}}",
            self.keyframe_id,
            self.size_before,
            self.size_after,
            self.m1,
            self.m2,
            self.m3,
            self.m4,
            self.m5,
            self.m6,
            self.pruned,
            self.split
        )
    }
}

/// Prunes `M4 ∪ M5 ∪ M6`, then splits the remaining members of `M1 ∪ M2 ∪ M3`. Survivors
/// keep their order; split children are appended in parent order and take `keyframe_id`.
pub fn apply_management(
    map: &mut GaussianMap,
    masks: &ManagementMasks,
    seed: u64,
    keyframe_id: u32,
) -> Result<ManagementReport> {
    if masks.generation != map.generation() || masks.densify.len() != map.len() || masks.prune.len() != map.len() {
        return Err(contract(format!(
            "masks from map generation {} applied to generation {}",
            masks.generation,
            map.generation()
        )));
    }
    let count = |v: &[u8], bit: u8| v.iter().filter(|&&t| t & bit != 0).count();
    let size_before = map.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(size_before);
    let mut origin = Vec::with_capacity(size_before);
    let mut children = Vec::new();
    let (mut pruned, mut split) = (0, 0);
    for (i, g) in map.iter().enumerate() {
        if masks.prune[i] != 0 {
            pruned += 1;
        } else if masks.densify[i] != 0 {
            split += 1;
            let (a, b) = split_gaussian(g, &mut rng, keyframe_id);
            children.push(a);
            children.push(b);
        } else {
            kept.push(g.clone());
            origin.push(Some(i));
        }
    }
    origin.extend(std::iter::repeat_n(None, children.len()));
    kept.extend(children);
    *map.gaussians_mut() = kept;
    Ok(ManagementReport {
        keyframe_id,
        size_before,
        size_after: map.len(),
        m1: count(&masks.densify, M1),
        m2: count(&masks.densify, M2),
        m3: count(&masks.densify, M3),
        m4: count(&masks.prune, M4),
        m5: count(&masks.prune, M5),
        m6: count(&masks.prune, M6),
        pruned,
        split,
        origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::gaussian::Gaussian3D;
    use crate::se3::PoseSE3;
    use crate::splat::rasterize;
    use nalgebra::Vector3;

    fn stats(n: usize) -> GaussianErrorStats {
        GaussianErrorStats {
            generation: 0,
            e_dssim: vec![0.0; n],
            e_flow: vec![0.0; n],
            density: vec![1.0; n],
            en_dssim: vec![Some(0.0); n],
            en_flow: vec![Some(0.0); n],
            radius: vec![8.0; n],
            pos_grad: vec![1.0; n],
            opacity: vec![0.5; n],
        }
    }

    fn blobs() -> GaussianMap {
        GaussianMap::new(vec![
            Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 4.0), 0.3, 0.6, Vector3::new(1.0, 0.0, 0.0)).unwrap(),
            Gaussian3D::isotropic(Vector3::new(0.5, 0.2, 5.0), 0.5, 0.8, Vector3::new(0.0, 1.0, 0.0)).unwrap(),
            Gaussian3D::isotropic(Vector3::new(-0.6, 0.3, 6.0), 0.1, 0.9, Vector3::new(0.0, 0.0, 1.0)).unwrap(),
        ])
    }

    #[test]
    fn zero_loss_gives_zero_error() {
        let map = blobs();
        let r = rasterize(&map, &PoseSE3::identity(), &CameraIntrinsics::simple(32, 32, 30.0));
        let e = gaussian_error(&r, &ScalarMap::filled(32, 32, 0.0)).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
        assert!(gaussian_error(&r, &ScalarMap::filled(31, 32, 0.0)).is_err());
    }

    #[test]
    fn silhouette_normalizes_to_one() {
        let map = blobs();
        let r = rasterize(&map, &PoseSE3::identity(), &CameraIntrinsics::simple(32, 32, 30.0));
        let d = gaussian_error(&r, &r.silhouette).unwrap();
        for v in normalized_error(&d, &d).into_iter().flatten() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_loss_matches_direct_summation() {
        let map = GaussianMap::new(vec![blobs().get(0).clone()]);
        let r = rasterize(&map, &PoseSE3::identity(), &CameraIntrinsics::simple(32, 32, 30.0));
        let e = gaussian_error(&r, &ScalarMap::filled(32, 32, 0.37)).unwrap();
        let direct: f64 = r.records.iter().map(|(_, e)| e.weight).sum::<f64>() * 0.37;
        assert!((e[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_scale_invariant_and_undefined_without_density() {
        let n = normalized_error(&[2.0, 4.0, 1.0], &[1.0, 2.0, 0.0]);
        assert_eq!(n, vec![Some(2.0), Some(2.0), None]);
    }

    #[test]
    fn infinite_thresholds_give_empty_masks() {
        let s = stats(4);
        let cfg = ManagementConfig::disabled();
        let masks = compute_masks(&s, &cfg);
        assert!(masks.densify.iter().chain(&masks.prune).all(|&t| t == 0));
    }

    #[test]
    fn paper_threshold_examples() {
        let cfg = ManagementConfig::default();
        let mut s = stats(4);
        s.radius[0] = 50.0;
        s.pos_grad[1] = 1e-5;
        s.e_dssim[1] = 0.3;
        s.radius[1] = 12.0;
        s.opacity[2] = 0.01;
        s.radius[3] = 3.0;
        s.en_flow[3] = Some(0.5);
        let d = densify_masks(&s, &cfg);
        let p = prune_masks(&s, &cfg);
        assert!(d[0] & M3 != 0);
        assert!(d[1] & M1 != 0);
        assert!(p[2] & M6 != 0);
        assert!(p[3] & M4 != 0);
        s.en_flow[3] = None;
        s.en_dssim[3] = None;
        assert_eq!(prune_masks(&s, &cfg)[3] & (M4 | M5), 0);
    }

    #[test]
    fn raising_thresholds_never_enlarges_masks() {
        let mut s = stats(50);
        for i in 0..50 {
            let f = i as f64 / 50.0;
            s.radius[i] = 60.0 * f;
            s.e_dssim[i] = f;
            s.en_dssim[i] = Some(2.0 * (1.0 - f));
            s.en_flow[i] = Some(f * f);
            s.pos_grad[i] = 1e-3 * (1.0 - f);
            s.opacity[i] = f;
        }
        let base = ManagementConfig::default();
        let m0 = compute_masks(&s, &base);
        let mut raised = base.clone();
        raised.eta_s1 *= 1.5;
        raised.eta_s2 *= 1.5;
        raised.eta_r2 *= 1.5;
        raised.eta_p1 *= 1.5;
        raised.eta_p2 *= 1.5;
        raised.eta_p3 *= 1.5;
        raised.eta_r1 *= 1.5;
        let m1 = compute_masks(&s, &raised);
        for i in 0..50 {
            assert_eq!(m1.densify[i] & !m0.densify[i], 0);
            assert_eq!(m1.prune[i] & !m0.prune[i], 0);
        }
        assert_eq!(compute_masks(&s, &base), m0);
    }

    #[test]
    fn prune_takes_precedence_and_generation_advances() {
        let mut map = blobs();
        let g0 = map.generation();
        let masks = ManagementMasks { generation: g0, densify: vec![M3, M1, 0], prune: vec![M6, 0, 0] };
        let report = apply_management(&mut map, &masks, 7, 3).unwrap();
        assert_eq!((report.pruned, report.split), (1, 1));
        assert_eq!(map.len(), 3);
        assert_eq!(report.origin, vec![Some(2), None, None]);
        assert!(map.generation() > g0);
        assert_eq!(map.get(1).keyframe_id, 3);
        assert!(map.iter().all(|g| g.validate().is_ok()));
        assert!(apply_management(&mut map, &masks, 7, 3).is_err());
    }

    #[test]
    fn empty_masks_only_advance_generation() {
        let mut map = blobs();
        let before = map.gaussians().to_vec();
        let g0 = map.generation();
        let masks = ManagementMasks { generation: g0, densify: vec![0; 3], prune: vec![0; 3] };
        let report = apply_management(&mut map, &masks, 1, 0).unwrap();
        assert_eq!(map.gaussians(), &before[..]);
        assert!(map.generation() > g0);
        assert!(report.to_json_line().starts_with("{\"keyframe_id\":0,"));
    }
}
