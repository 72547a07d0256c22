//! Analytic gradients of the flow and image losses with respect to every Gaussian
//! parameter and to the camera poses, plus a central-difference oracle.
//!
//! The chain runs in three stages:
//!
//! 1. per-pixel blending backward ([`backward_flow_2d`], [`backward_image_2d`]) producing
//!    screen-space gradients per Gaussian: `∂L/∂μ`, `∂L/∂Σ′⁻¹`, `∂L/∂o`, and for flow the
//!    accumulated `A_t = ∂L/∂B_t⁻¹`, `A_{t+1} = ∂L/∂B_{t+1}`;
//! 2. eigen-factor backward (`∂L/∂Q = (A + Aᵀ)·Q·Sˢ`, `∂L/∂Sˢ = Qᵀ·A·Q`) folded into
//!    `∂L/∂Σ′` through [`crate::symmat2::backprop_eigen`];
//! 3. projection pullback to world-space means, quaternions, log-scales, and to left
//!    se(3) increments of each pose ([`backward_to_world`], [`backward_to_pose`]).

mod blend;
mod fd;
mod project;

pub use blend::{backward_flow_2d, backward_image_2d, Gaussian2DGrad, Intermediate2DGradients};
pub use fd::{apply_perturbation, finite_diff_oracle, gradcheck_rel_err, ParamClass, ParamCoord};
pub use project::{backward_to_pose, backward_to_world, pullback_projection, ProjectionPullback};

use nalgebra::{Vector3, Vector4};

use crate::error::Result;
use crate::grid::{RgbImage, VectorMap};
use crate::se3::Tangent;
use crate::splat::{FlowRender, GaussianMap, RenderOutputs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    /// Include `∂Σ′/∂p_cam` through the perspective Jacobian.
    pub mean_jacobian_term: bool,
    /// Drop every gradient that flows through the blend weights.
    pub freeze_alpha: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { mean_jacobian_term: true, freeze_alpha: false }
    }
}

/// Gradients with respect to the optimizer's parameterization of each Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradients {
    pub d_mean: Vec<Vector3<f64>>,
    /// Raw quaternion, `(w, i, j, k)`.
    pub d_quat: Vec<Vector4<f64>>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_color: Vec<Vector3<f64>>,
    /// `‖∂L/∂μ‖` in the rendering frame (pixels).
    pub position_grad_2d: Vec<f64>,
}

impl MapGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mean: vec![Vector3::zeros(); n],
            d_quat: vec![Vector4::zeros(); n],
            d_log_scale: vec![Vector3::zeros(); n],
            d_opacity_logit: vec![0.0; n],
            d_color: vec![Vector3::zeros(); n],
            position_grad_2d: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mean.is_empty()
    }

    /// `self += scale·other`; position gradients are summed unscaled by magnitude.
    pub fn add_scaled(&mut self, other: &MapGradients, scale: f64) {
        assert_eq!(self.len(), other.len(), "gradient sets differ in size");
        for i in 0..self.len() {
            self.d_mean[i] += other.d_mean[i] * scale;
            self.d_quat[i] += other.d_quat[i] * scale;
            self.d_log_scale[i] += other.d_log_scale[i] * scale;
            self.d_opacity_logit[i] += other.d_opacity_logit[i] * scale;
            self.d_color[i] += other.d_color[i] * scale;
            self.position_grad_2d[i] += other.position_grad_2d[i] * scale.abs();
        }
    }

    pub fn is_finite_at(&self, i: usize) -> bool {
        self.d_mean[i].iter().all(|v| v.is_finite())
            && self.d_quat[i].iter().all(|v| v.is_finite())
            && self.d_log_scale[i].iter().all(|v| v.is_finite())
            && self.d_opacity_logit[i].is_finite()
            && self.d_color[i].iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.len() {
            m = m
                .max(self.d_mean[i].amax())
                .max(self.d_quat[i].amax())
                .max(self.d_log_scale[i].amax())
                .max(self.d_opacity_logit[i].abs())
                .max(self.d_color[i].amax());
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGradients {
    /// Left-trivialized gradient for the rendering pose.
    pub d_tau_t: Tangent,
    /// Left-trivialized gradient for the flow target pose.
    pub d_tau_next: Tangent,
}

impl Default for PoseGradients {
    fn default() -> Self {
        Self { d_tau_t: Tangent::zeros(), d_tau_next: Tangent::zeros() }
    }
}

/// Complete flow-loss backward: map gradients and both pose gradients.
#[derive(Debug, Clone)]
pub struct FlowBackward {
    pub map: MapGradients,
    pub pose: PoseGradients,
    pub intermediate: Intermediate2DGradients,
}

pub fn flow_backward(
    map: &GaussianMap,
    render: &RenderOutputs,
    flow: &FlowRender,
    dl_dzeta: &VectorMap,
    opts: &BackwardOptions,
) -> Result<FlowBackward> {
    let g2d = backward_flow_2d(dl_dzeta, render, flow, opts)?;
    let map_grads = backward_to_world(&g2d, render, Some(flow), map, opts)?;
    let pose = backward_to_pose(&g2d, render, Some(flow), opts)?;
    Ok(FlowBackward { map: map_grads, pose, intermediate: g2d })
}

/// Photometric backward for one rendered frame: map gradients and the rendering-pose gradient.
pub fn backward_image(
    dl_dpixel: &RgbImage,
    map: &GaussianMap,
    render: &RenderOutputs,
    opts: &BackwardOptions,
) -> Result<(MapGradients, Tangent)> {
    let g2d = backward_image_2d(dl_dpixel, render, map, opts)?;
    let grads = backward_to_world(&g2d, render, None, map, opts)?;
    let pose = backward_to_pose(&g2d, render, None, opts)?;
    Ok((grads, pose.d_tau_t))
}
