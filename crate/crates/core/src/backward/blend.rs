use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::BackwardOptions;
use crate::error::{contract, Result};
use crate::grid::{RgbImage, VectorMap};
use crate::splat::{BlendEntry, FlowRender, GaussianMap, RenderOutputs};
use crate::symmat2::{backprop_eigen, HalfPower, SymMat2};

/// Screen-space gradient accumulators of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2DGrad {
    /// `∂L/∂μ_t`, through the transfer offset and the blend weights.
    pub d_mu: Vector2<f64>,
    /// `∂L/∂Σ′_t⁻¹` in `(a, b, c)` form, from the blend weights.
    pub d_conic: SymMat2,
    pub d_opacity: f64,
    pub d_color: Vector3<f64>,
    /// `∂L/∂μ_{t+1}`.
    pub d_mu_next: Vector2<f64>,
    /// `A_t = ∂L/∂B_t⁻¹`.
    pub d_b_inv_t: Matrix2<f64>,
    /// `A_{t+1} = ∂L/∂B_{t+1}`.
    pub d_b_next: Matrix2<f64>,
}

impl Default for Gaussian2DGrad {
    fn default() -> Self {
        Self {
            d_mu: Vector2::zeros(),
            d_conic: SymMat2::ZERO,
            d_opacity: 0.0,
            d_color: Vector3::zeros(),
            d_mu_next: Vector2::zeros(),
            d_b_inv_t: Matrix2::zeros(),
            d_b_next: Matrix2::zeros(),
        }
    }
}

impl Gaussian2DGrad {
    fn accumulate(&mut self, o: &Gaussian2DGrad) {
        self.d_mu += o.d_mu;
        self.d_conic += o.d_conic;
        self.d_opacity += o.d_opacity;
        self.d_color += o.d_color;
        self.d_mu_next += o.d_mu_next;
        self.d_b_inv_t += o.d_b_inv_t;
        self.d_b_next += o.d_b_next;
    }
}

/// Per-Gaussian screen-space gradients, including the eigen-factor gradients and the
/// resulting `∂L/∂Σ′` for both frames.
#[derive(Debug, Clone)]
pub struct Intermediate2DGradients {
    pub per_gaussian: Vec<Gaussian2DGrad>,
    /// `∂L/∂Q_t`, `∂L/∂S_t^{−1/2}`.
    pub d_q_t: Vec<Matrix2<f64>>,
    pub d_spow_t: Vec<Matrix2<f64>>,
    /// `∂L/∂Q_{t+1}`, `∂L/∂S_{t+1}^{1/2}`.
    pub d_q_next: Vec<Matrix2<f64>>,
    pub d_spow_next: Vec<Matrix2<f64>>,
    /// Total `∂L/∂Σ′_t` (eigen path plus blend-weight path).
    pub d_sigma_t: Vec<SymMat2>,
    pub d_sigma_next: Vec<SymMat2>,
    /// Gaussians that appear in at least one blend record.
    pub touched: Vec<bool>,
}

/// Upstream for one blend entry's contribution and its value-specific direct terms.
trait BlendValue: Sync {
    type V: Copy
        + std::ops::Add<Output = Self::V>
        + std::ops::Sub<Output = Self::V>
        + std::ops::Mul<f64, Output = Self::V>;
    fn zero() -> Self::V;
    fn dot(a: &Self::V, b: &Self::V) -> f64;
    fn upstream(&self, j: usize) -> Self::V;
    /// Value blended by entry `e` at pixel `j`; `None` when the entry carries no value.
    fn value(&self, j: usize, e: &BlendEntry) -> Option<Self::V>;
    /// Gradients that do not go through the blend weights.
    fn direct(&self, j: usize, e: &BlendEntry, upstream: &Self::V, acc: &mut Gaussian2DGrad);
}

struct FlowValue<'a> {
    dl_dzeta: &'a VectorMap,
    flow: &'a FlowRender,
    width: usize,
}

impl BlendValue for FlowValue<'_> {
    type V = Vector2<f64>;
    fn zero() -> Self::V {
        Vector2::zeros()
    }
    fn dot(a: &Self::V, b: &Self::V) -> f64 {
        a.dot(b)
    }
    fn upstream(&self, j: usize) -> Self::V {
        self.dl_dzeta[j]
    }
    fn value(&self, j: usize, e: &BlendEntry) -> Option<Self::V> {
        let t = self.flow.transfers[e.gaussian as usize].as_ref()?;
        let pix = Vector2::new((j % self.width) as f64, (j / self.width) as f64);
        Some(t.transfer * e.delta + t.mu_next - pix)
    }
    fn direct(&self, _j: usize, e: &BlendEntry, d: &Self::V, acc: &mut Gaussian2DGrad) {
        let Some(t) = self.flow.transfers[e.gaussian as usize].as_ref() else { return };
        let wd = d * e.weight;
        acc.d_mu_next += wd;
        acc.d_mu -= t.transfer.transpose() * wd;
        // v = D·δᵀ
        let v = wd * e.delta.transpose();
        acc.d_b_inv_t += t.b_next.m * v;
        acc.d_b_next += v * t.b_inv_t.m;
    }
}

struct ColorValue<'a> {
    dl_dpixel: &'a RgbImage,
    colors: Vec<Vector3<f64>>,
}

impl BlendValue for ColorValue<'_> {
    type V = Vector3<f64>;
    fn zero() -> Self::V {
        Vector3::zeros()
    }
    fn dot(a: &Self::V, b: &Self::V) -> f64 {
        a.dot(b)
    }
    fn upstream(&self, j: usize) -> Self::V {
        self.dl_dpixel[j]
    }
    fn value(&self, _j: usize, e: &BlendEntry) -> Option<Self::V> {
        Some(self.colors[e.gaussian as usize])
    }
    fn direct(&self, _j: usize, e: &BlendEntry, d: &Self::V, acc: &mut Gaussian2DGrad) {
        acc.d_color += d * e.weight;
    }
}

fn blend_backward<B: BlendValue>(value: &B, render: &RenderOutputs, opts: &BackwardOptions) -> Vec<Gaussian2DGrad> {
    let n = render.projections.len();
    let per_tile: Vec<Vec<Gaussian2DGrad>> = render
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![Gaussian2DGrad::default(); list.len()];
            let mut values: Vec<Option<B::V>> = Vec::new();
            for j in render.tile_pixels(t) {
                let entries = render.records.pixel(j);
                if entries.is_empty() {
                    continue;
                }
                let d = value.upstream(j);
                values.clear();
                values.extend(entries.iter().map(|e| value.value(j, e)));
                let mut suffix = B::zero();
                for (e, v) in entries.iter().zip(values.iter()).rev() {
                    let slot = &mut acc[e.slot as usize];
                    value.direct(j, e, &d, slot);
                    let Some(v) = v else { continue };
                    if !opts.freeze_alpha && !e.clamped {
                        let proj = render.projections[e.gaussian as usize].as_ref().unwrap();
                        // ∂ζ/∂αᵢ = Tᵢ·gᵢ − Σ_{k>i} w_k g_k / (1 − αᵢ)
                        let dl_dalpha = B::dot(&d, &(*v * e.transmittance - suffix * (1.0 / (1.0 - e.alpha))));
                        slot.d_opacity += dl_dalpha * e.falloff;
                        let dl_dpower = dl_dalpha * e.alpha;
                        // power = −½ δᵀCδ, δ = p − μ
                        slot.d_mu += proj.conic.to_matrix() * e.delta * dl_dpower;
                        let (dx, dy) = (e.delta.x, e.delta.y);
                        slot.d_conic += SymMat2::new(-0.5 * dx * dx, -dx * dy, -0.5 * dy * dy) * dl_dpower;
                    }
                    suffix = suffix + *v * e.weight;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![Gaussian2DGrad::default(); n];
    for (t, list) in render.tiles.iter().enumerate() {
        for (slot, &gi) in list.iter().enumerate() {
            out[gi as usize].accumulate(&per_tile[t][slot]);
        }
    }
    out
}

fn touched(render: &RenderOutputs) -> Vec<bool> {
    let mut touched = vec![false; render.projections.len()];
    for (_, e) in render.records.iter() {
        touched[e.gaussian as usize] = true;
    }
    touched
}

/// `∂L/∂Σ′` from a gradient on the conic `Σ′⁻¹`.
fn conic_to_sigma(d_conic: &SymMat2, conic: &SymMat2) -> SymMat2 {
    let c = conic.to_matrix();
    SymMat2::grad_from_matrix(&(-(c * d_conic.grad_to_matrix() * c)))
}

/// Flow-loss blending backward given `D = ∂L/∂ζ`.
pub fn backward_flow_2d(
    dl_dzeta: &VectorMap,
    render: &RenderOutputs,
    flow: &FlowRender,
    opts: &BackwardOptions,
) -> Result<Intermediate2DGradients> {
    let (w, h) = (render.intrinsics.width, render.intrinsics.height);
    if dl_dzeta.width() != w || dl_dzeta.height() != h || flow.transfers.len() != render.projections.len() {
        return Err(contract("flow gradient buffer, render and transfers come from different passes"));
    }
    let value = FlowValue { dl_dzeta, flow, width: w };
    let per_gaussian = blend_backward(&value, render, opts);
    let n = per_gaussian.len();
    let mut out = Intermediate2DGradients {
        d_q_t: vec![Matrix2::zeros(); n],
        d_spow_t: vec![Matrix2::zeros(); n],
        d_q_next: vec![Matrix2::zeros(); n],
        d_spow_next: vec![Matrix2::zeros(); n],
        d_sigma_t: vec![SymMat2::ZERO; n],
        d_sigma_next: vec![SymMat2::ZERO; n],
        touched: touched(render),
        per_gaussian,
    };
    for i in 0..n {
        let (Some(proj), Some(tr)) = (render.projections[i].as_ref(), flow.transfers[i].as_ref()) else {
            if let Some(proj) = render.projections[i].as_ref() {
                out.d_sigma_t[i] = conic_to_sigma(&out.per_gaussian[i].d_conic, &proj.conic);
            }
            continue;
        };
        let g = &out.per_gaussian[i];
        let (dt, dn) = (&proj.decomp, &tr.proj_next.decomp);
        let a_t = g.d_b_inv_t;
        let a_n = g.d_b_next;
        out.d_q_t[i] = (a_t + a_t.transpose()) * dt.q * Matrix2::from_diagonal(&tr.b_inv_t.s_pow);
        out.d_spow_t[i] = dt.q.transpose() * a_t * dt.q;
        out.d_q_next[i] = (a_n + a_n.transpose()) * dn.q * Matrix2::from_diagonal(&tr.b_next.s_pow);
        out.d_spow_next[i] = dn.q.transpose() * a_n * dn.q;
        out.d_sigma_t[i] = backprop_eigen(&out.d_q_t[i], &out.d_spow_t[i], dt, HalfPower::InvSqrt)
            + conic_to_sigma(&g.d_conic, &proj.conic);
        out.d_sigma_next[i] = backprop_eigen(&out.d_q_next[i], &out.d_spow_next[i], dn, HalfPower::Sqrt);
    }
    Ok(out)
}

/// Photometric blending backward given `∂L/∂pixel`.
pub fn backward_image_2d(
    dl_dpixel: &RgbImage,
    render: &RenderOutputs,
    map: &GaussianMap,
    opts: &BackwardOptions,
) -> Result<Intermediate2DGradients> {
    let (w, h) = (render.intrinsics.width, render.intrinsics.height);
    if dl_dpixel.width() != w || dl_dpixel.height() != h {
        return Err(contract("pixel gradient size differs from the render"));
    }
    if render.generation != map.generation() || render.projections.len() != map.len() {
        return Err(contract("render is stale with respect to the map"));
    }
    let value = ColorValue { dl_dpixel, colors: map.iter().map(|g| g.color).collect() };
    let per_gaussian = blend_backward(&value, render, opts);
    let n = per_gaussian.len();
    let d_sigma_t = (0..n)
        .map(|i| match render.projections[i].as_ref() {
            Some(p) => conic_to_sigma(&per_gaussian[i].d_conic, &p.conic),
            None => SymMat2::ZERO,
        })
        .collect();
    Ok(Intermediate2DGradients {
        d_q_t: vec![Matrix2::zeros(); n],
        d_spow_t: vec![Matrix2::zeros(); n],
        d_q_next: vec![Matrix2::zeros(); n],
        d_spow_next: vec![Matrix2::zeros(); n],
        d_sigma_t,
        d_sigma_next: vec![SymMat2::ZERO; n],
        touched: touched(render),
        per_gaussian,
    })
}
