//! Losses, the tracking and mapping objectives, and the Adam optimizer.

mod adam;
mod image;
mod regularize;

pub use adam::{
    adam_update, MapLearningRates, OptimizerState, PoseOptimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
    PARAMS_PER_GAUSSIAN,
};
pub use image::{dssim_map, image_loss, ImageLossOutput, LossMaps, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use regularize::{iso_loss, opacity_entropy_loss};

use std::io::Write;

use crate::backward::{backward_flow_2d, backward_image, backward_image_2d, backward_to_pose, flow_backward};
use crate::backward::{BackwardOptions, MapGradients};
use crate::camera::Keyframe;
use crate::config::LossConfig;
use crate::error::{contract, Result};
use crate::flow::FlowField;
use crate::grid::ScalarMap;
use crate::robustflow::{flow_loss, RobustFlowModel};
use crate::se3::Tangent;
use crate::splat::{rasterize, rasterize_flow, GaussianMap, RenderOutputs};

/// An older keyframe whose render is reused while the new pose is being tracked.
#[derive(Debug, Clone, Copy)]
pub struct FlowSource<'a> {
    /// Render of the map at the older keyframe's pose.
    pub render: &'a RenderOutputs,
    /// Observed flow from the older keyframe to the new frame.
    pub observed: Option<&'a FlowField>,
}

#[derive(Debug, Clone)]
pub struct TrackingOutput {
    pub total: f64,
    pub image: f64,
    /// Unweighted flow loss per source.
    pub flows: Vec<f64>,
    /// Gradient with respect to a left increment of the new pose.
    pub d_tau: Tangent,
}

/// `L_image(new) + λ₁·Σ_s L_flow(s → new)` and its gradient with respect to the new pose.
/// Flow is rendered in each source frame toward `new_frame.pose`.
pub fn tracking_objective(
    map: &GaussianMap,
    new_frame: &Keyframe,
    sources: &[FlowSource<'_>],
    cfg: &LossConfig,
    opts: &BackwardOptions,
) -> Result<TrackingOutput> {
    let k = &new_frame.intrinsics;
    let render = rasterize(map, &new_frame.pose, k);
    let img = image_loss(&render.color, &new_frame.image, cfg.lambda_dssim)?;
    let g2d = backward_image_2d(&img.dl_dpixel, &render, map, opts)?;
    let mut d_tau = backward_to_pose(&g2d, &render, None, opts)?.d_tau_t;
    let model = RobustFlowModel::from_config(cfg, k.width, k.height)?;
    let mut flows = Vec::with_capacity(sources.len());
    let mut total = img.total;
    for src in sources {
        let observed = src.observed.ok_or_else(|| contract("tracking source has no observed flow"))?;
        let flow = rasterize_flow(map, src.render, &new_frame.pose)?;
        let loss = flow_loss(&flow.flow, observed, &model)?;
        total += cfg.lambda1 * loss.total;
        flows.push(loss.total);
        if cfg.lambda1 != 0.0 {
            let g = backward_flow_2d(&loss.dl_dzeta, src.render, &flow, opts)?;
            d_tau += backward_to_pose(&g, src.render, Some(&flow), opts)?.d_tau_next * cfg.lambda1;
        }
    }
    Ok(TrackingOutput { total, image: img.total, flows, d_tau })
}

#[derive(Debug, Clone)]
pub struct MappingOutput {
    pub total: f64,
    pub image: f64,
    pub flow: f64,
    pub iso: f64,
    pub opacity: f64,
    pub grads: MapGradients,
    pub render: RenderOutputs,
    pub maps: LossMaps,
    /// Confidence-weighted flow loss map, when the flow term was evaluated.
    pub flow_map: Option<ScalarMap>,
}

/// `L_image(a) + λ₂·L_flow(a → b) + λ₃·L_iso + λ₄·L_opa` with poses held fixed.
/// `edge` indexes into `window`.
pub fn mapping_objective(
    map: &GaussianMap,
    window: &[Keyframe],
    edge: (usize, usize),
    observed_ab: &FlowField,
    cfg: &LossConfig,
    opts: &BackwardOptions,
) -> Result<MappingOutput> {
    let (a, b) = edge;
    if a >= window.len() || b >= window.len() || a == b {
        return Err(contract(format!("edge ({a}, {b}) is not inside a window of {}", window.len())));
    }
    let (ka, kb) = (&window[a], &window[b]);
    let k = &ka.intrinsics;
    let render = rasterize(map, &ka.pose, k);
    let img = image_loss(&render.color, &ka.image, cfg.lambda_dssim)?;
    let (mut grads, _) = backward_image(&img.dl_dpixel, map, &render, opts)?;

    let mut flow_total = 0.0;
    let mut flow_map = None;
    if cfg.lambda2 != 0.0 {
        let model = RobustFlowModel::from_config(cfg, k.width, k.height)?;
        let flow = rasterize_flow(map, &render, &kb.pose)?;
        let loss = flow_loss(&flow.flow, observed_ab, &model)?;
        flow_total = loss.total;
        flow_map = Some(loss.f_map);
        let fb = flow_backward(map, &render, &flow, &loss.dl_dzeta, opts)?;
        grads.add_scaled(&fb.map, cfg.lambda2);
    }
    let (iso, d_iso) = iso_loss(map);
    let (opa, d_opa) = opacity_entropy_loss(map);
    for i in 0..map.len() {
        grads.d_log_scale[i] += d_iso[i] * cfg.lambda3;
        grads.d_opacity_logit[i] += d_opa[i] * cfg.lambda4;
    }
    Ok(MappingOutput {
        total: img.total + cfg.lambda2 * flow_total + cfg.lambda3 * iso + cfg.lambda4 * opa,
        image: img.total,
        flow: flow_total,
        iso,
        opacity: opa,
        grads,
        render,
        maps: img.maps,
        flow_map,
    })
}

/// One row of the loss-curve log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub total: f64,
    pub image: f64,
    pub flow: f64,
    pub iso: f64,
    pub opacity: f64,
}

impl From<(u64, &MappingOutput)> for LossRecord {
    fn from((iteration, m): (u64, &MappingOutput)) -> Self {
        Self { iteration, total: m.total, image: m.image, flow: m.flow, iso: m.iso, opacity: m.opacity }
    }
}

pub fn write_loss_curve<W: Write>(mut out: W, rows: &[LossRecord]) -> std::io::Result<()> {
    writeln!(out, "iteration,L_total,L_image,L_flow,L_iso,L_opa")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e},{:e},{:e},{:e}", r.iteration, r.total, r.image, r.flow, r.iso, r.opacity)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::gaussian::Gaussian3D;
    use crate::se3::{pose_retract, se3_exp, PoseSE3};
    use nalgebra::{Quaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64, n: usize) -> GaussianMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianMap::new(
            (0..n)
                .map(|_| {
                    let z = rng.random_range(3.0..5.0);
                    Gaussian3D::new(
                        Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z),
                        Quaternion::new(1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.1),
                        Vector3::new(rng.random_range(0.15..0.4), rng.random_range(0.15..0.4), 0.2),
                        rng.random_range(0.3..0.9),
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                        0,
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    fn frames(map: &GaussianMap) -> Vec<Keyframe> {
        let k = CameraIntrinsics::simple(32, 32, 30.0);
        let poses = [
            PoseSE3::identity(),
            se3_exp(&Tangent::new(0.0, 0.02, 0.0, 0.08, 0.0, 0.0)),
            se3_exp(&Tangent::new(0.01, 0.04, 0.0, 0.16, 0.02, 0.0)),
        ];
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| Keyframe::new(i as u32, rasterize(map, p, &k).color, *p, k).unwrap())
            .collect()
    }

    fn flow_between(map: &GaussianMap, a: &Keyframe, b: &Keyframe) -> FlowField {
        let r = rasterize(map, &a.pose, &a.intrinsics);
        rasterize_flow(map, &r, &b.pose).unwrap().flow
    }

    #[test]
    fn tracking_is_stationary_at_the_truth() {
        let map = scene(1, 15);
        let kf = frames(&map);
        let renders: Vec<RenderOutputs> = kf[..2].iter().map(|f| rasterize(&map, &f.pose, &f.intrinsics)).collect();
        let obs: Vec<FlowField> = kf[..2].iter().map(|f| flow_between(&map, f, &kf[2])).collect();
        let sources: Vec<FlowSource> =
            (0..2).map(|i| FlowSource { render: &renders[i], observed: Some(&obs[i]) }).collect();
        let out = tracking_objective(&map, &kf[2], &sources, &LossConfig::default(), &Default::default()).unwrap();
        assert!(out.d_tau.amax() < 1e-9, "{:?}", out.d_tau);
        let missing = [FlowSource { render: &renders[0], observed: None }];
        assert!(tracking_objective(&map, &kf[2], &missing, &LossConfig::default(), &Default::default()).is_err());
    }

    #[test]
    fn tracking_gradient_matches_finite_differences_and_is_linear_in_lambda1() {
        let map = scene(2, 15);
        let kf = frames(&map);
        let renders: Vec<RenderOutputs> = kf[..2].iter().map(|f| rasterize(&map, &f.pose, &f.intrinsics)).collect();
        let obs: Vec<FlowField> = kf[..2].iter().map(|f| flow_between(&map, f, &kf[2])).collect();
        let sources: Vec<FlowSource> =
            (0..2).map(|i| FlowSource { render: &renders[i], observed: Some(&obs[i]) }).collect();
        let mut probe = kf[2].clone();
        probe.pose = pose_retract(&probe.pose, &Tangent::new(0.01, -0.01, 0.005, 0.03, 0.02, -0.02));
        let cfg = LossConfig::default();
        let out = tracking_objective(&map, &probe, &sources, &cfg, &Default::default()).unwrap();
        let h = 1e-6;
        for c in 0..6 {
            let mut e = Tangent::zeros();
            e[c] = h;
            let mut p = probe.clone();
            p.pose = pose_retract(&probe.pose, &e);
            let lp = tracking_objective(&map, &p, &sources, &cfg, &Default::default()).unwrap().total;
            p.pose = pose_retract(&probe.pose, &-e);
            let lm = tracking_objective(&map, &p, &sources, &cfg, &Default::default()).unwrap().total;
            let num = (lp - lm) / (2.0 * h);
            let err = (num - out.d_tau[c]).abs() / num.abs().max(out.d_tau[c].abs()).max(1.0);
            assert!(err < 1e-5, "coord {c}: {num} vs {}", out.d_tau[c]);
        }

        let zero = LossConfig { lambda1: 0.0, ..cfg.clone() };
        let base = tracking_objective(&map, &probe, &sources, &zero, &Default::default()).unwrap();
        assert_eq!(base.total, base.image);
        let double = LossConfig { lambda1: 2.0 * cfg.lambda1, ..cfg.clone() };
        let twice = tracking_objective(&map, &probe, &sources, &double, &Default::default()).unwrap();
        let flow_path = out.d_tau - base.d_tau;
        let flow_path2 = twice.d_tau - base.d_tau;
        assert!((flow_path2 - flow_path * 2.0).amax() < 1e-12 * flow_path.amax().max(1.0));
        let sum = out.image + cfg.lambda1 * out.flows.iter().sum::<f64>();
        assert!((out.total - sum).abs() < 1e-12);
    }

    #[test]
    fn mapping_with_perfect_data_is_regularizer_only() {
        let map = scene(3, 12);
        let kf = frames(&map);
        let obs = flow_between(&map, &kf[0], &kf[1]);
        let cfg = LossConfig::default();
        let out = mapping_objective(&map, &kf, (0, 1), &obs, &cfg, &Default::default()).unwrap();
        assert!(out.image.abs() < 1e-14);
        // ψ(0) = ln(1 + ν/f(0)) is the floor of the flow term, not zero
        let model = RobustFlowModel::from_config(&cfg, 32, 32).unwrap();
        let r = rasterize(&map, &kf[0].pose, &kf[0].intrinsics);
        let f = rasterize_flow(&map, &r, &kf[1].pose).unwrap();
        let floor: f64 = (0..obs.flow.len()).filter(|&j| f.flow.valid[j]).map(|j| obs.confidence[j] * model.psi(0.0).0).sum();
        assert!((out.flow - floor).abs() < 1e-9 * floor.max(1.0));
        let (iso, d_iso) = iso_loss(&map);
        let (opa, d_opa) = opacity_entropy_loss(&map);
        let expected = out.image + cfg.lambda2 * out.flow + cfg.lambda3 * iso + cfg.lambda4 * opa;
        assert!((out.total - expected).abs() < 1e-12);
        for i in 0..map.len() {
            assert!(out.grads.d_mean[i].amax() < 1e-9);
            assert!((out.grads.d_log_scale[i] - d_iso[i] * cfg.lambda3).amax() < 1e-9);
            assert!((out.grads.d_opacity_logit[i] - d_opa[i] * cfg.lambda4).abs() < 1e-9);
        }
        assert!(mapping_objective(&map, &kf, (0, 5), &obs, &cfg, &Default::default()).is_err());
    }

    #[test]
    fn mapping_gradients_match_finite_differences() {
        let map = scene(4, 20);
        let kf = frames(&map);
        let obs = flow_between(&map, &kf[0], &kf[1]);
        let mut perturbed = map.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for g in perturbed.gaussians_mut().iter_mut() {
            g.mean += Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0);
            g.opacity_logit += 0.3;
        }
        let cfg = LossConfig::default();
        let out = mapping_objective(&perturbed, &kf, (0, 1), &obs, &cfg, &Default::default()).unwrap();
        let h = 1e-6;
        let eval = |m: &GaussianMap| mapping_objective(m, &kf, (0, 1), &obs, &cfg, &Default::default()).unwrap().total;
        let mut fails = 0;
        for i in 0..perturbed.len() {
            for c in 0..3 {
                let mut p = perturbed.clone();
                p.gaussians_mut()[i].mean[c] += h;
                let mut m = perturbed.clone();
                m.gaussians_mut()[i].mean[c] -= h;
                let num = (eval(&p) - eval(&m)) / (2.0 * h);
                let ana = out.grads.d_mean[i][c];
                if (num - ana).abs() / num.abs().max(ana.abs()).max(1.0) > 1e-4 {
                    fails += 1;
                }
            }
            let mut p = perturbed.clone();
            p.gaussians_mut()[i].opacity_logit += h;
            let mut m = perturbed.clone();
            m.gaussians_mut()[i].opacity_logit -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            let ana = out.grads.d_opacity_logit[i];
            if (num - ana).abs() / num.abs().max(ana.abs()).max(1.0) > 1e-4 {
                fails += 1;
            }
        }
        assert_eq!(fails, 0);
    }

    #[test]
    fn loss_curve_csv() {
        let mut buf = Vec::new();
        let rows = [LossRecord { iteration: 3, total: 1.5, image: 1.0, flow: 0.25, iso: 0.5, opacity: 0.0 }];
        write_loss_curve(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iteration,L_total,L_image,L_flow,L_iso,L_opa");
        assert_eq!(text.lines().count(), 2);
    }
}
