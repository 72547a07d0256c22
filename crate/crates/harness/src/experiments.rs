//! Controlled experiments on generated scenes: pose recovery, flow-driven geometry
//! correction, and floater pruning.

use gsflow_core::manage::{gaussian_error, normalized_error, GaussianErrorStats};
use gsflow_core::objectives::{FlowSource, MapLearningRates};
use gsflow_core::splat::{project_gaussian, LOW_PASS_DILATION};
use gsflow_core::{
    pose_retract, rasterize, FlowField, Gaussian3D, GaussianMap, Keyframe, LearningRates, LossConfig, ManagementConfig,
    PoseSE3, RenderOutputs, ScalarMap, Tangent,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::oracle::{flow_oracle_from_renders, FlowNoise};
use crate::scene::{generate_scene, Layout, Scene, SceneSpec};
use crate::slam::{keyframe_depth_error, track_pose, window_edges, FlowCache, Mapper};

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecovery {
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub extent: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Tracks a frame of a ground-truth scene from a pose perturbed by `rot_deg` degrees and
/// `trans_frac × extent`, with oracle flow from the two preceding frames.
pub fn pose_recovery(
    seed: u64,
    n_gaussians: usize,
    sigma: f64,
    rot_deg: f64,
    trans_frac: f64,
    iters: usize,
) -> Result<PoseRecovery> {
    let spec = SceneSpec { n_gaussians, layout: Layout::RandomBlobs, seed, ..SceneSpec::default() };
    let scene = generate_scene(&spec)?;
    let k = scene.intrinsics;
    let target = scene.n_frames() / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ac4);
    let noise = FlowNoise { sigma, dropout: 0.0 };
    let src = [target - 1, target - 2];
    let renders: Vec<_> = src.iter().map(|&f| rasterize(&scene.map, &scene.poses[f], &k)).collect();
    let flows: Vec<_> = src
        .iter()
        .map(|&f| flow_oracle_from_renders(&scene.renders[f], &scene.renders[target], &noise, &mut rng))
        .collect();
    let sources: Vec<FlowSource<'_>> =
        renders.iter().zip(&flows).map(|(r, f)| FlowSource { render: r, observed: Some(f) }).collect();

    let w = unit_vector(&mut rng) * rot_deg.to_radians();
    let v = unit_vector(&mut rng) * trans_frac * spec.extent;
    let gt = scene.poses[target];
    let init = pose_retract(&gt, &Tangent::new(w.x, w.y, w.z, v.x, v.y, v.z));
    let frame = Keyframe::new(0, scene.renders[target].color.clone(), init, k)?;
    let cfg = LossConfig::default();
    let res = track_pose(&scene.map, &frame, &sources, &cfg, &LearningRates::default(), spec.extent, iters, 0)?;
    let (rot, trans) = res.pose.distance(&gt);
    Ok(PoseRecovery {
        rot_err_deg: rot.to_degrees(),
        trans_err: trans,
        extent: spec.extent,
        initial_loss: res.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: res.losses.last().copied().unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryCorrection {
    /// Median depth abs-rel error before and after mapping.
    pub initial: f64,
    pub final_: f64,
}

impl GeometryCorrection {
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_ / self.initial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySetup {
    pub layout: Layout,
    pub n_gaussians: usize,
    pub n_keyframes: usize,
    pub keyframe_stride: usize,
    pub iters: usize,
    pub depth_range: (f64, f64),
    pub lr: LearningRates,
}

impl Default for GeometrySetup {
    fn default() -> Self {
        Self {
            layout: Layout::RandomBlobs,
            n_gaussians: 300,
            n_keyframes: 5,
            keyframe_stride: 4,
            iters: 500,
            depth_range: (0.7, 1.3),
            lr: LearningRates::default(),
        }
    }
}

/// Moves every Gaussian along its ray from the first camera by a random depth factor
/// (scaling its size with it so the first view is nearly unchanged), then runs mapping over
/// a window of keyframes with known poses. Management is off.
pub fn geometry_correction(seed: u64, lambda2: f64, setup: &GeometrySetup) -> Result<GeometryCorrection> {
    let n_frames = setup.keyframe_stride * (setup.n_keyframes - 1) + 1;
    let spec =
        SceneSpec { n_gaussians: setup.n_gaussians, layout: setup.layout, n_frames, seed, ..SceneSpec::default() };
    let scene = generate_scene(&spec)?;
    let frames: Vec<usize> = (0..setup.n_keyframes).map(|i| i * setup.keyframe_stride).collect();
    let kfs: Vec<Keyframe> = frames
        .iter()
        .enumerate()
        .map(|(i, &f)| Keyframe::new(i as u32, scene.renders[f].color.clone(), scene.poses[f], scene.intrinsics))
        .collect::<gsflow_core::Result<_>>()?;

    let mut map = perturb_depths(&scene, &scene.poses[frames[0]], setup.depth_range, seed);
    let error = |map: &GaussianMap| keyframe_depth_error(map, &kfs, &frames, &scene).map_or(f64::NAN, |e| e.0);
    let initial = error(&map);

    let cfg = LossConfig { lambda2, ..LossConfig::default() };
    let edges = window_edges(kfs.len(), 3);
    let mut cache = FlowCache::new(&scene);
    let flows: Vec<_> = edges.iter().map(|&(a, b)| cache.get(frames[a], frames[b]).clone()).collect();
    let flow_refs: Vec<_> = flows.iter().collect();
    let mut mapper = Mapper::new(&map, MapLearningRates::from_config(&setup.lr, spec.extent), seed);
    mapper.run(&mut map, &kfs, &edges, &flow_refs, &cfg, None, setup.iters)?;
    Ok(GeometryCorrection { initial, final_: error(&map) })
}

fn perturb_depths(scene: &Scene, reference: &PoseSE3, range: (f64, f64), seed: u64) -> GaussianMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde97);
    let center = reference.center();
    let mut map = scene.map.clone();
    for g in map.gaussians_mut().iter_mut() {
        let s = rng.random_range(range.0..range.1);
        g.mean = center + (g.mean - center) * s;
        g.scale *= s;
    }
    map
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloaterPruning {
    pub n_floaters: usize,
    pub n_clean: usize,
    pub floaters_removed: usize,
    pub clean_removed: usize,
    /// Largest |Ê[ℋ] − 1| seen in any keyframe before, between and after the management
    /// events.
    pub max_identity_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloaterSetup {
    pub n_gaussians: usize,
    pub n_floaters: usize,
    pub iters: usize,
    pub manage_every: usize,
    pub floater_opacity: f64,
    /// Bound on the projected radius of every floater in every keyframe (px).
    pub floater_radius_px: f64,
    pub nu: Option<f64>,
    pub n_keyframes: usize,
    pub keyframe_stride: usize,
}

impl Default for FloaterSetup {
    fn default() -> Self {
        Self {
            n_gaussians: 400,
            n_floaters: 50,
            iters: 10,
            manage_every: 5,
            floater_opacity: 0.7,
            floater_radius_px: 5.0,
            nu: None,
            n_keyframes: 3,
            keyframe_stride: 4,
        }
    }
}

// labels carried in `keyframe_id`, clear of the window's keyframe ids
const CLEAN: u32 = u32::MAX - 1;
const FLOATER: u32 = u32::MAX;

/// A generated scene with floaters planted in front of the first keyframe, its keyframes,
/// and the window's edges with their observed flow. Floaters and clean Gaussians are
/// labelled through `keyframe_id`.
#[allow(clippy::type_complexity)]
pub fn planted(
    seed: u64,
    setup: &FloaterSetup,
) -> Result<(GaussianMap, Vec<Keyframe>, Vec<FlowField>, Vec<(usize, usize)>)> {
    let n_frames = setup.keyframe_stride * (setup.n_keyframes - 1) + 1;
    let spec = SceneSpec { n_gaussians: setup.n_gaussians, n_frames, seed, ..SceneSpec::default() };
    let scene = generate_scene(&spec)?;
    let k = scene.intrinsics;
    let frames: Vec<usize> = (0..setup.n_keyframes).map(|i| i * setup.keyframe_stride).collect();
    let kfs: Vec<Keyframe> = frames
        .iter()
        .enumerate()
        .map(|(i, &f)| Keyframe::new(i as u32, scene.renders[f].color.clone(), scene.poses[f], k))
        .collect::<gsflow_core::Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10a7);
    let mut map = scene.map.clone();
    for g in map.gaussians_mut().iter_mut() {
        g.keyframe_id = CLEAN;
    }
    let pose0 = scene.poses[frames[0]];
    let to_world = pose0.inverse();
    // rejection-sample floaters that every keyframe sees whole, with radius below the bound
    let mut planted = 0;
    while planted < setup.n_floaters {
        let z = spec.extent * rng.random_range(0.3..0.7);
        let px = nalgebra::Vector2::new(
            rng.random_range(0.1..0.9) * k.width as f64,
            rng.random_range(0.1..0.9) * k.height as f64,
        );
        // projected radius 3·√(σ_px² + dilation) in the first keyframe
        let radius_px = rng.random_range(0.4..0.8) * setup.floater_radius_px;
        let sigma_px = ((radius_px / 3.0).powi(2) - LOW_PASS_DILATION).max(0.05).sqrt();
        let sigma = sigma_px * z / k.fx;
        let color = Vector3::new(rng.random(), rng.random(), rng.random());
        let mean = to_world.transform(&k.unproject(&px, z));
        let mut g = Gaussian3D::isotropic(mean, sigma, setup.floater_opacity, color)?;
        g.keyframe_id = FLOATER;
        let inside = kfs.iter().all(|kf| {
            project_gaussian(&g, &kf.pose, &k).is_some_and(|p| {
                p.radius < setup.floater_radius_px
                    && p.mu.x > p.radius
                    && p.mu.y > p.radius
                    && p.mu.x < k.width as f64 - p.radius
                    && p.mu.y < k.height as f64 - p.radius
            })
        });
        if inside {
            map.push(g);
            planted += 1;
        }
    }
    let edges = window_edges(kfs.len(), 3);
    let mut cache = FlowCache::new(&scene);
    let flows = edges.iter().map(|&(a, b)| cache.get(frames[a], frames[b]).clone()).collect();
    Ok((map, kfs, flows, edges))
}

/// Plants small, randomly coloured floaters between the camera and a converged scene,
/// then runs mapping with management at the given thresholds.
pub fn floater_pruning(seed: u64, mcfg: &ManagementConfig, setup: &FloaterSetup) -> Result<FloaterPruning> {
    let (mut map, kfs, flows, edges) = planted(seed, setup)?;
    let k = kfs[0].intrinsics;
    let n_clean = map.iter().filter(|g| g.keyframe_id == CLEAN).count();
    let n_floaters = map.len() - n_clean;
    let extent = SceneSpec::default().extent;
    let cfg = LossConfig { nu: setup.nu, ..LossConfig::default() };
    let flow_refs: Vec<_> = flows.iter().collect();
    let mut max_identity_err: f64 = 0.0;
    let mut mapper = Mapper::new(&map, MapLearningRates::from_config(&LearningRates::default(), extent), seed);
    let mut done = 0;
    while done < setup.iters {
        for kf in &kfs {
            max_identity_err = max_identity_err.max(identity_error(&map, &rasterize(&map, &kf.pose, &k))?);
        }
        // rotate the edge list so chunks keep cycling through all edges
        let n = setup.manage_every.min(setup.iters - done);
        let off = done % edges.len();
        let e: Vec<_> = edges[off..].iter().chain(&edges[..off]).copied().collect();
        let f: Vec<_> = flow_refs[off..].iter().chain(&flow_refs[..off]).copied().collect();
        mapper.run(&mut map, &kfs, &e, &f, &cfg, Some((mcfg, setup.manage_every)), n)?;
        done += n;
    }
    for kf in &kfs {
        max_identity_err = max_identity_err.max(identity_error(&map, &rasterize(&map, &kf.pose, &k))?);
    }
    // floaters are too small to be split, so every other pruned Gaussian is clean or a
    // child of a clean one
    let floaters_removed = n_floaters - map.iter().filter(|g| g.keyframe_id == FLOATER).count();
    let pruned: usize = mapper.events.iter().map(|r| r.pruned).sum();
    Ok(FloaterPruning {
        n_floaters,
        n_clean,
        floaters_removed,
        clean_removed: pruned - floaters_removed,
        max_identity_err,
    })
}

/// `max |Ê[ℋ] − 1|` over Gaussians with density contribution above 1e-6: the silhouette's
/// per-Gaussian error normalized by the density the management statistics report.
fn identity_error(map: &GaussianMap, render: &RenderOutputs) -> Result<f64> {
    let zeros = ScalarMap::filled(render.intrinsics.width, render.intrinsics.height, 0.0);
    let stats = GaussianErrorStats::compute(map, render, &zeros, None, &vec![0.0; map.len()])?;
    let e = gaussian_error(render, &render.silhouette)?;
    Ok(normalized_error(&e, &stats.density)
        .iter()
        .zip(&stats.density)
        .filter(|(_, &d)| d > 1e-6)
        .filter_map(|(v, _)| *v)
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max))
}
