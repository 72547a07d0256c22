use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::project::{project_unculled, Projected2D};
use super::raster::RenderOutputs;
use super::GaussianMap;
use crate::error::{contract, Result};
use crate::flow::FlowField;
use crate::se3::PoseSE3;
use crate::symmat2::{mat_pow_half, HalfPower, MatPowHalf};

/// Validity threshold on the silhouette for rendered flow.
pub const FLOW_SILHOUETTE_MIN: f64 = 1e-2;

/// How one Gaussian's footprint maps from frame t into frame t+1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTransfer {
    /// `M = B_{t+1}·B_t⁻¹`.
    pub transfer: Matrix2<f64>,
    pub mu_next: Vector2<f64>,
    /// `B_t⁻¹ = Σ′_t^{−1/2}`.
    pub b_inv_t: MatPowHalf,
    /// `B_{t+1} = Σ′_{t+1}^{1/2}`.
    pub b_next: MatPowHalf,
    pub proj_next: Projected2D,
}

#[derive(Debug, Clone)]
pub struct FlowRender {
    pub flow: FlowField,
    /// Per Gaussian; `None` when the Gaussian is culled at t or behind the camera at t+1.
    pub transfers: Vec<Option<FlowTransfer>>,
    pub pose_next: PoseSE3,
}

/// Renders GaussianFlow from the frame of `render` toward `pose_next`:
///
/// `ζ(p) = Σᵢ wᵢ·(Mᵢ·δᵢ + μᵢ,ₜ₊₁ − p)`.
///
/// Gaussians leaving the image in t+1 still contribute with their unclipped projection;
/// a contributor behind the t+1 camera invalidates the pixel.
pub fn rasterize_flow(map: &GaussianMap, render: &RenderOutputs, pose_next: &PoseSE3) -> Result<FlowRender> {
    if render.generation != map.generation() || render.projections.len() != map.len() {
        return Err(contract(format!(
            "blend records from map generation {} used with generation {}",
            render.generation,
            map.generation()
        )));
    }
    let k = &render.intrinsics;
    let transfers: Vec<Option<FlowTransfer>> = map
        .gaussians()
        .par_iter()
        .zip(render.projections.par_iter())
        .map(|(g, proj_t)| {
            let proj_t = proj_t.as_ref()?;
            let proj_next = project_unculled(g, pose_next, k)?;
            let b_inv_t = mat_pow_half(&proj_t.decomp, HalfPower::InvSqrt).ok()?;
            let b_next = mat_pow_half(&proj_next.decomp, HalfPower::Sqrt).ok()?;
            Some(FlowTransfer { transfer: b_next.m * b_inv_t.m, mu_next: proj_next.mu, b_inv_t, b_next, proj_next })
        })
        .collect();

    let (w, h) = (k.width, k.height);
    let records = &render.records;
    let mut field = FlowField::zeros(w, h);
    let per_pixel: Vec<(Vector2<f64>, bool)> = (0..w * h)
        .into_par_iter()
        .map(|j| {
            let pix = Vector2::new((j % w) as f64, (j / w) as f64);
            let mut zeta = Vector2::zeros();
            let mut ok = true;
            for e in records.pixel(j) {
                match &transfers[e.gaussian as usize] {
                    Some(t) => zeta += e.weight * (t.transfer * e.delta + t.mu_next - pix),
                    None => ok = false,
                }
            }
            (zeta, ok)
        })
        .collect();
    for (j, (zeta, ok)) in per_pixel.into_iter().enumerate() {
        let sil = render.silhouette[j];
        field.flow[j] = zeta;
        field.confidence[j] = sil.clamp(0.0, 1.0);
        field.valid[j] = ok && sil > FLOW_SILHOUETTE_MIN;
    }
    Ok(FlowRender { flow: field, transfers, pose_next: *pose_next })
}

impl FlowRender {
    pub fn grid_shape(&self) -> (usize, usize) {
        (self.flow.width(), self.flow.height())
    }
}
