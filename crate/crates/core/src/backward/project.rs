use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use super::{BackwardOptions, Intermediate2DGradients, MapGradients, PoseGradients};
use crate::camera::CameraIntrinsics;
use crate::error::{contract, Result};
use crate::gaussian::covariance3d_vjp;
use crate::se3::Tangent;
use crate::splat::{FlowRender, GaussianMap, Projected2D, RenderOutputs};
use crate::symmat2::SymMat2;

/// Gradients of one projection with respect to its camera-frame inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionPullback {
    /// `∂L/∂p_cam`, including the perspective-Jacobian term when enabled.
    pub d_pcam: Vector3<f64>,
    /// `∂L/∂Σ` for the world-frame 3D covariance (symmetric matrix convention).
    pub d_cov_world: Matrix3<f64>,
    /// Rotation part of the left pose increment coming through `W·Σ·Wᵀ`.
    pub d_omega_cov: Vector3<f64>,
}

impl ProjectionPullback {
    /// Left-trivialized pose gradient: `(p_cam × ∂L/∂p_cam + ω_cov, ∂L/∂p_cam)`.
    pub fn pose_tangent(&self, p_cam: &Vector3<f64>) -> Tangent {
        let w = p_cam.cross(&self.d_pcam) + self.d_omega_cov;
        Tangent::new(w.x, w.y, w.z, self.d_pcam.x, self.d_pcam.y, self.d_pcam.z)
    }
}

/// Pulls `∂L/∂μ` and `∂L/∂Σ′` (in `(a, b, c)` partial form) back through
/// `μ = π(p_cam)` and `Σ′ = J·W·Σ·Wᵀ·Jᵀ + 0.3·I`.
pub fn pullback_projection(
    proj: &Projected2D,
    k: &CameraIntrinsics,
    d_mu: &Vector2<f64>,
    d_sigma: &SymMat2,
    mean_jacobian_term: bool,
) -> ProjectionPullback {
    let j = &proj.jacobian;
    let g = d_sigma.grad_to_matrix();
    let gc = j.transpose() * g * j;
    let w = &proj.rotation;
    let d_cov_world = w.transpose() * gc * w;

    let mut d_pcam = j.transpose() * d_mu;
    if mean_jacobian_term {
        let dj: Matrix2x3<f64> = 2.0 * g * j * proj.cov_cam;
        let (x, y, z) = (proj.p_cam.x, proj.p_cam.y, proj.p_cam.z);
        let (iz2, iz3) = (1.0 / (z * z), 1.0 / (z * z * z));
        d_pcam.x += dj[(0, 2)] * (-k.fx * iz2);
        d_pcam.y += dj[(1, 2)] * (-k.fy * iz2);
        d_pcam.z += dj[(0, 0)] * (-k.fx * iz2)
            + dj[(0, 2)] * (2.0 * k.fx * x * iz3)
            + dj[(1, 1)] * (-k.fy * iz2)
            + dj[(1, 2)] * (2.0 * k.fy * y * iz3);
    }

    let kk = 2.0 * gc * proj.cov_cam;
    let d_omega_cov = Vector3::new(kk[(2, 1)] - kk[(1, 2)], kk[(0, 2)] - kk[(2, 0)], kk[(1, 0)] - kk[(0, 1)]);
    ProjectionPullback { d_pcam, d_cov_world, d_omega_cov }
}

fn check_state(g2d: &Intermediate2DGradients, render: &RenderOutputs, flow: Option<&FlowRender>) -> Result<()> {
    let n = render.projections.len();
    if g2d.per_gaussian.len() != n {
        return Err(contract("screen-space gradients and projections differ in size"));
    }
    if let Some(f) = flow {
        if f.transfers.len() != n {
            return Err(contract("flow transfers and projections differ in size"));
        }
    }
    Ok(())
}

/// Per Gaussian, pullbacks for frame t and (when flow is given and the Gaussian has a
/// transfer) frame t+1.
fn pullbacks(
    g2d: &Intermediate2DGradients,
    render: &RenderOutputs,
    flow: Option<&FlowRender>,
    opts: &BackwardOptions,
) -> Vec<Option<(ProjectionPullback, Option<ProjectionPullback>)>> {
    let k = &render.intrinsics;
    (0..render.projections.len())
        .map(|i| {
            let proj = render.projections[i].as_ref()?;
            if !g2d.touched[i] {
                return None;
            }
            let g = &g2d.per_gaussian[i];
            let pb_t = pullback_projection(proj, k, &g.d_mu, &g2d.d_sigma_t[i], opts.mean_jacobian_term);
            let pb_n = flow.and_then(|f| f.transfers[i].as_ref()).map(|tr| {
                pullback_projection(&tr.proj_next, k, &g.d_mu_next, &g2d.d_sigma_next[i], opts.mean_jacobian_term)
            });
            Some((pb_t, pb_n))
        })
        .collect()
}

/// Pulls screen-space gradients back to the map parameterization.
pub fn backward_to_world(
    g2d: &Intermediate2DGradients,
    render: &RenderOutputs,
    flow: Option<&FlowRender>,
    map: &GaussianMap,
    opts: &BackwardOptions,
) -> Result<MapGradients> {
    check_state(g2d, render, flow)?;
    if map.len() != render.projections.len() || map.generation() != render.generation {
        return Err(contract("render is stale with respect to the map"));
    }
    let mut out = MapGradients::zeros(map.len());
    for (i, pb) in pullbacks(g2d, render, flow, opts).into_iter().enumerate() {
        let Some((pb_t, pb_n)) = pb else { continue };
        let proj = render.projections[i].as_ref().unwrap();
        let g = &g2d.per_gaussian[i];
        let gauss = map.get(i);
        let mut d_mean = proj.rotation.transpose() * pb_t.d_pcam;
        let mut d_cov = pb_t.d_cov_world;
        if let (Some(pb_n), Some(tr)) = (pb_n, flow.and_then(|f| f.transfers[i].as_ref())) {
            d_mean += tr.proj_next.rotation.transpose() * pb_n.d_pcam;
            d_cov += pb_n.d_cov_world;
        }
        let (d_quat, d_scale) = covariance3d_vjp(&gauss.rotation, &gauss.scale, &d_cov);
        let o = proj.opacity;
        out.d_mean[i] = d_mean;
        out.d_quat[i] = d_quat;
        out.d_log_scale[i] = d_scale.component_mul(&gauss.scale);
        out.d_opacity_logit[i] = g.d_opacity * o * (1.0 - o);
        out.d_color[i] = g.d_color;
        out.position_grad_2d[i] = g.d_mu.norm();
    }
    Ok(out)
}

/// Left-trivialized pose gradients for the rendering pose and, with flow, the target pose.
pub fn backward_to_pose(
    g2d: &Intermediate2DGradients,
    render: &RenderOutputs,
    flow: Option<&FlowRender>,
    opts: &BackwardOptions,
) -> Result<PoseGradients> {
    check_state(g2d, render, flow)?;
    let mut out = PoseGradients::default();
    for (i, pb) in pullbacks(g2d, render, flow, opts).into_iter().enumerate() {
        let Some((pb_t, pb_n)) = pb else { continue };
        let proj = render.projections[i].as_ref().unwrap();
        out.d_tau_t += pb_t.pose_tangent(&proj.p_cam);
        if let (Some(pb_n), Some(tr)) = (pb_n, flow.and_then(|f| f.transfers[i].as_ref())) {
            out.d_tau_next += pb_n.pose_tangent(&tr.proj_next.p_cam);
        }
    }
    Ok(out)
}
