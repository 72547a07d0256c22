//! Alternating tracking / mapping loop over a generated scene.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use gsflow_core::backward::BackwardOptions;
use gsflow_core::config::ConfigFields;
use gsflow_core::manage::{apply_management, compute_masks, GaussianErrorStats, ManagementReport};
use gsflow_core::objectives::{
    mapping_objective, tracking_objective, FlowSource, LossRecord, MapLearningRates, OptimizerState, PoseOptimizer,
};
use gsflow_core::{
    rasterize, CameraIntrinsics, FlowField, Gaussian3D, GaussianMap, Keyframe, LearningRates, LossConfig,
    ManagementConfig, PoseSE3,
};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::metrics::{ate_rmse, depth_abs_rel, median_sorted, psnr, ssim};
use crate::oracle::{flow_oracle_from_renders, triangulate_depth, FlowNoise};
use crate::scene::{generate_scene, Scene, SceneSpec};

/// Silhouette below which a pixel is treated as uncovered by the map.
pub const LOW_SILHOUETTE: f64 = 0.5;
/// Initial opacity of inserted Gaussians.
pub const INSERT_OPACITY: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub n_track: usize,
    pub n_map: usize,
    pub manage_every: usize,
    pub final_refine: usize,
    pub keyframe_stride: usize,
    pub window: usize,
    pub max_edge_gap: usize,
    pub refine_sweeps: usize,
    /// Tracking iterations per pose during window refinement.
    pub refine_iters: usize,
    /// Pixel spacing of the insertion grid.
    pub insert_stride: usize,
    /// Relative depth jitter applied to inserted Gaussians.
    pub insert_jitter: f64,
    /// Consecutive tracking-loss increases that abort the run.
    pub divergence_patience: usize,
    pub lr: LearningRates,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            n_track: 100,
            n_map: 150,
            manage_every: 5,
            final_refine: 500,
            keyframe_stride: 4,
            window: 8,
            max_edge_gap: 3,
            refine_sweeps: 2,
            refine_iters: 10,
            insert_stride: 4,
            insert_jitter: 0.1,
            divergence_patience: 50,
            lr: LearningRates::default(),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.keyframe_stride == 0 || self.window < 2 || self.max_edge_gap == 0 || self.insert_stride == 0 {
            return Err(HarnessError::Contract("stride, window, edge gap and insert stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.insert_jitter) {
            return Err(HarnessError::Contract("insert_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn mapping_disabled(&self) -> bool {
        self.n_map == 0 && self.final_refine == 0
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("bad value {value:?}: {e}"))
}

impl ConfigFields for Schedule {
    fn assign(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
        Some(match key {
            "n_track" => parse(value).map(|v| self.n_track = v),
            "n_map" => parse(value).map(|v| self.n_map = v),
            "manage_every" => parse(value).map(|v| self.manage_every = v),
            "final_refine" => parse(value).map(|v| self.final_refine = v),
            "keyframe_stride" => parse(value).map(|v| self.keyframe_stride = v),
            "window" => parse(value).map(|v| self.window = v),
            "max_edge_gap" => parse(value).map(|v| self.max_edge_gap = v),
            "refine_sweeps" => parse(value).map(|v| self.refine_sweeps = v),
            "refine_iters" => parse(value).map(|v| self.refine_iters = v),
            "insert_stride" => parse(value).map(|v| self.insert_stride = v),
            "insert_jitter" => parse(value).map(|v| self.insert_jitter = v),
            "divergence_patience" => parse(value).map(|v| self.divergence_patience = v),
            _ => return self.lr.assign(key, value),
        })
    }
}

/// Keyframe frame indices and held-out evaluation frames (every 5th non-keyframe).
pub fn split_frames(n_frames: usize, stride: usize) -> (Vec<usize>, Vec<usize>) {
    let keyframes: Vec<usize> = (0..n_frames).step_by(stride.max(1)).collect();
    let held_out = (0..n_frames)
        .filter(|f| f % stride.max(1) != 0)
        .enumerate()
        .filter(|(k, _)| k % 5 == 4)
        .map(|(_, f)| f)
        .collect();
    (keyframes, held_out)
}

/// Flow pairs `(a, b)` between window slots at most `max_gap` apart, in both directions.
pub fn window_edges(len: usize, max_gap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..len {
        for b in 0..len {
            if a != b && a.abs_diff(b) <= max_gap {
                out.push((a, b));
            }
        }
    }
    out
}

/// Observed flow between ground-truth frames, generated on first use. Each pair draws its
/// noise from its own stream so results do not depend on request order.
#[derive(Debug)]
pub struct FlowCache<'a> {
    scene: &'a Scene,
    noise: FlowNoise,
    flows: BTreeMap<(usize, usize), FlowField>,
}

impl<'a> FlowCache<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        let noise = FlowNoise { sigma: scene.spec.flow_noise, dropout: scene.spec.confidence_dropout };
        Self { scene, noise, flows: BTreeMap::new() }
    }

    pub fn get(&mut self, a: usize, b: usize) -> &FlowField {
        let (scene, noise) = (self.scene, self.noise);
        self.flows.entry((a, b)).or_insert_with(|| {
            let seed = scene.spec.seed ^ ((a as u64) << 40) ^ ((b as u64) << 20) ^ 0x5eed_f10;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            flow_oracle_from_renders(&scene.renders[a], &scene.renders[b], &noise, &mut rng)
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub pose: PoseSE3,
    pub losses: Vec<f64>,
    pub diverged: bool,
}

/// Final learning-rate multiplier of a tracking run. The rate is constant for the first half
/// of the iterations and then decays geometrically to this factor.
pub const TRACK_LR_DECAY: f64 = 0.1;

/// First-order pose tracking from `frame.pose`. The translation rate is scaled by `extent`.
/// Stops early once the loss has risen for `patience` consecutive iterations.
#[allow(clippy::too_many_arguments)]
pub fn track_pose(
    map: &GaussianMap,
    frame: &Keyframe,
    sources: &[FlowSource<'_>],
    cfg: &LossConfig,
    lr: &LearningRates,
    extent: f64,
    iters: usize,
    patience: usize,
) -> Result<TrackResult> {
    let opts = BackwardOptions::default();
    let mut opt = PoseOptimizer::from_config(lr, extent);
    opt.pivot = Vector3::new(0.0, 0.0, scene_depth(map, frame).unwrap_or(0.0));
    let mut current = frame.clone();
    let mut losses = Vec::with_capacity(iters);
    let mut rising = 0;
    for i in 0..iters {
        let decay = TRACK_LR_DECAY.powf((2.0 * i as f64 / iters as f64 - 1.0).max(0.0));
        opt.lr_rot = lr.lr_pose_rot * decay;
        opt.lr_trans = lr.lr_pose_trans * extent * decay;
        let out = tracking_objective(map, &current, sources, cfg, &opts)?;
        if let Some(&last) = losses.last() {
            rising = if out.total > last { rising + 1 } else { 0 };
        }
        losses.push(out.total);
        if patience > 0 && rising >= patience {
            return Ok(TrackResult { pose: current.pose, losses, diverged: true });
        }
        current.pose = opt.step(&current.pose, &out.d_tau);
    }
    Ok(TrackResult { pose: current.pose, losses, diverged: false })
}

/// Median rendered depth of the map seen from `frame`, over covered pixels.
pub fn scene_depth(map: &GaussianMap, frame: &Keyframe) -> Option<f64> {
    let r = rasterize(map, &frame.pose, &frame.intrinsics);
    let mut d: Vec<f64> = (0..r.depth.len()).filter(|&j| r.silhouette[j] > LOW_SILHOUETTE).map(|j| r.depth[j]).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(median_sorted(&d))
}

/// Inserts Gaussians on a pixel grid of `frame` where the current map leaves the image
/// uncovered, placing each at the depth triangulated from `flow` toward `other_pose`.
#[allow(clippy::too_many_arguments)]
pub fn insert_gaussians<R: Rng + ?Sized>(
    map: &mut GaussianMap,
    frame: &Keyframe,
    other_pose: &PoseSE3,
    flow: &FlowField,
    stride: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<usize> {
    let k: &CameraIntrinsics = &frame.intrinsics;
    let render = rasterize(map, &frame.pose, k);
    let to_world = frame.pose.inverse();
    let mut added = 0;
    for y in (stride / 2..k.height).step_by(stride) {
        for x in (stride / 2..k.width).step_by(stride) {
            let j = y * k.width + x;
            if render.silhouette[j] >= LOW_SILHOUETTE || !flow.valid[j] || flow.confidence[j] <= 0.0 {
                continue;
            }
            let pix = Vector2::new(x as f64, y as f64);
            let Some(z) = triangulate_depth(&pix, &flow.flow[j], &frame.pose, other_pose, k) else {
                continue;
            };
            let z = if jitter > 0.0 { z * rng.random_range(1.0 - jitter..1.0 + jitter) } else { z };
            if z > k.far {
                continue;
            }
            let mean = to_world.transform(&k.unproject(&pix, z));
            let sigma = 0.5 * stride as f64 * z / k.fx;
            let c = frame.image[j];
            let mut g = Gaussian3D::isotropic(mean, sigma, INSERT_OPACITY, Vector3::new(c[0], c[1], c[2]))?;
            g.keyframe_id = frame.id;
            map.push(g);
            added += 1;
        }
    }
    Ok(added)
}

/// Map optimizer plus the bookkeeping that spans mapping phases.
#[derive(Debug, Clone)]
pub struct Mapper {
    pub opt: OptimizerState,
    pos_grad_max: Vec<f64>,
    pub iteration: u64,
    pub curve: Vec<LossRecord>,
    pub size_history: Vec<(u64, usize)>,
    pub events: Vec<ManagementReport>,
    pub seed: u64,
}

impl Mapper {
    pub fn new(map: &GaussianMap, lr: MapLearningRates, seed: u64) -> Self {
        Self {
            opt: OptimizerState::new(map.len(), lr),
            pos_grad_max: vec![0.0; map.len()],
            iteration: 0,
            curve: Vec::new(),
            size_history: vec![(0, map.len())],
            events: Vec::new(),
            seed,
        }
    }

    /// Extends the optimizer state for Gaussians appended to the map since the last call.
    pub fn sync(&mut self, map: &GaussianMap) {
        let old = self.opt.len();
        if map.len() == old {
            return;
        }
        let origin: Vec<Option<usize>> = (0..map.len()).map(|i| (i < old).then_some(i)).collect();
        self.opt.remap(&origin);
        self.pos_grad_max.resize(map.len(), 0.0);
        self.size_history.push((self.iteration, map.len()));
    }

    /// `iters` mapping iterations cycling over `edges` of `window`. With `manage` set, every
    /// `manage_every` iterations the map is re-rendered on the current edge and pruned/split.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &mut self,
        map: &mut GaussianMap,
        window: &[Keyframe],
        edges: &[(usize, usize)],
        flows: &[&FlowField],
        cfg: &LossConfig,
        manage: Option<(&ManagementConfig, usize)>,
        iters: usize,
    ) -> Result<()> {
        if edges.is_empty() || iters == 0 {
            return Ok(());
        }
        self.sync(map);
        let opts = BackwardOptions::default();
        for it in 0..iters {
            let e = it % edges.len();
            let out = mapping_objective(map, window, edges[e], flows[e], cfg, &opts)?;
            for (m, g) in self.pos_grad_max.iter_mut().zip(&out.grads.position_grad_2d) {
                *m = m.max(*g);
            }
            self.opt.step(map, &out.grads);
            self.iteration += 1;
            self.curve.push(LossRecord::from((self.iteration, &out)));
            if let Some((mcfg, every)) = manage {
                if every > 0 && (it + 1) % every == 0 {
                    let fresh = mapping_objective(map, window, edges[e], flows[e], cfg, &opts)?;
                    let stats = GaussianErrorStats::compute(
                        map,
                        &fresh.render,
                        &fresh.maps.dssim_map,
                        fresh.flow_map.as_ref(),
                        &self.pos_grad_max,
                    )?;
                    let masks = compute_masks(&stats, mcfg);
                    let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.iteration);
                    let report = apply_management(map, &masks, seed, window[edges[e].0].id)?;
                    self.opt.remap(&report.origin);
                    self.pos_grad_max = vec![0.0; map.len()];
                    if report.size_after != report.size_before || report.split > 0 {
                        self.size_history.push((self.iteration, map.len()));
                    }
                    self.events.push(report);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewMetrics {
    pub frame: usize,
    pub psnr: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlamReport {
    pub ate_rmse: Option<f64>,
    pub held_out: Vec<ViewMetrics>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub depth_abs_rel_median: Option<f64>,
    pub depth_abs_rel_mean: Option<f64>,
    pub keyframes: Vec<usize>,
    pub map_size_history: Vec<(u64, usize)>,
    pub final_map_size: usize,
    pub mapping_iterations: u64,
    /// Last tracking loss per tracked keyframe.
    pub tracking_final_loss: Vec<f64>,
    pub management_events: usize,
    pub mapping_disabled: bool,
    /// Diagnostic when the divergence guard stopped the run.
    pub aborted: Option<String>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl SlamReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything a SLAM run produces.
#[derive(Debug, Clone)]
pub struct SlamRun {
    pub report: SlamReport,
    pub map: GaussianMap,
    /// `(frame index, estimated pose)` per processed keyframe.
    pub estimated: Vec<(usize, PoseSE3)>,
    pub ground_truth: Vec<(usize, PoseSE3)>,
    pub mapping_curve: Vec<LossRecord>,
    /// `(keyframe frame index, iteration, loss)` for every tracking step.
    pub tracking_curve: Vec<(usize, usize, f64)>,
    pub management: Vec<ManagementReport>,
}

fn keyframe(scene: &Scene, frame: usize, id: u32, pose: PoseSE3) -> Result<Keyframe> {
    Ok(Keyframe::new(id, scene.renders[frame].color.clone(), pose, scene.intrinsics)?)
}

fn edge_flows<'c>(
    cache: &'c mut FlowCache<'_>,
    frames: &[usize],
    edges: &[(usize, usize)],
) -> Vec<&'c FlowField> {
    for &(a, b) in edges {
        cache.get(frames[a], frames[b]);
    }
    let cache: &'c FlowCache<'_> = cache;
    edges.iter().map(|&(a, b)| &cache.flows[&(frames[a], frames[b])]).collect()
}

/// Runs the full loop on a freshly generated scene.
pub fn run_slam(
    spec: &SceneSpec,
    cfg: &LossConfig,
    mcfg: &ManagementConfig,
    schedule: &Schedule,
) -> Result<SlamRun> {
    cfg.validate()?;
    mcfg.validate()?;
    schedule.validate()?;
    let scene = generate_scene(spec)?;
    run_slam_on(&scene, cfg, mcfg, schedule)
}

pub fn run_slam_on(scene: &Scene, cfg: &LossConfig, mcfg: &ManagementConfig, schedule: &Schedule) -> Result<SlamRun> {
    let start = Instant::now();
    let (kf_frames, held_out) = split_frames(scene.n_frames(), schedule.keyframe_stride);
    if kf_frames.len() < 2 {
        return Err(HarnessError::Contract("need at least two keyframes".into()));
    }
    let spec = &scene.spec;
    let mut cache = FlowCache::new(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1a5e_47);
    let mut map = GaussianMap::new(Vec::new());

    // gauge: the first two keyframes take their ground-truth poses
    let mut kfs = vec![
        keyframe(scene, kf_frames[0], 0, scene.poses[kf_frames[0]])?,
        keyframe(scene, kf_frames[1], 1, scene.poses[kf_frames[1]])?,
    ];
    for (a, b) in [(0, 1), (1, 0)] {
        let flow = cache.get(kf_frames[a], kf_frames[b]).clone();
        let other = kfs[b].pose;
        insert_gaussians(&mut map, &kfs[a], &other, &flow, schedule.insert_stride, schedule.insert_jitter, &mut rng)?;
    }
    let mut mapper = Mapper::new(&map, MapLearningRates::from_config(&schedule.lr, spec.extent), spec.seed);
    let manage = Some((mcfg, schedule.manage_every));

    let map_window = |mapper: &mut Mapper, map: &mut GaussianMap, kfs: &[Keyframe], cache: &mut FlowCache<'_>, iters, manage| {
        let lo = kfs.len().saturating_sub(schedule.window);
        let window = &kfs[lo..];
        let frames: Vec<usize> = window.iter().map(|k| kf_frames[k.id as usize]).collect();
        let edges = window_edges(window.len(), schedule.max_edge_gap);
        let flows = edge_flows(cache, &frames, &edges);
        mapper.run(map, window, &edges, &flows, cfg, manage, iters)
    };
    map_window(&mut mapper, &mut map, &kfs, &mut cache, schedule.n_map, manage)?;

    let mut tracking_curve = Vec::new();
    let mut tracking_final_loss = Vec::new();
    let mut aborted = None;
    for (id, &frame) in kf_frames.iter().enumerate().skip(2) {
        let init = kfs[id - 1].pose;
        let new = keyframe(scene, frame, id as u32, init)?;
        let prev: Vec<usize> = (id.saturating_sub(2)..id).rev().collect();
        let renders: Vec<_> = prev.iter().map(|&p| rasterize(&map, &kfs[p].pose, &scene.intrinsics)).collect();
        for &p in &prev {
            cache.get(kf_frames[p], frame);
        }
        let sources: Vec<FlowSource<'_>> = prev
            .iter()
            .zip(&renders)
            .map(|(&p, r)| FlowSource { render: r, observed: Some(&cache.flows[&(kf_frames[p], frame)]) })
            .collect();
        let tracked =
            track_pose(&map, &new, &sources, cfg, &schedule.lr, spec.extent, schedule.n_track, schedule.divergence_patience)?;
        tracking_curve.extend(tracked.losses.iter().enumerate().map(|(i, &l)| (frame, i, l)));
        tracking_final_loss.push(tracked.losses.last().copied().unwrap_or(f64::NAN));
        if tracked.diverged {
            aborted = Some(format!(
                "tracking loss rose for {} consecutive iterations at frame {frame}",
                schedule.divergence_patience
            ));
            break;
        }
        let mut new = new;
        new.pose = tracked.pose;

        let flow = cache.get(frame, kf_frames[id - 1]).clone();
        let other = kfs[id - 1].pose;
        insert_gaussians(&mut map, &new, &other, &flow, schedule.insert_stride, schedule.insert_jitter, &mut rng)?;
        kfs.push(new);

        map_window(&mut mapper, &mut map, &kfs, &mut cache, schedule.n_map, manage)?;
        refine_window_poses(&map, &mut kfs, &kf_frames, &mut cache, cfg, schedule, spec.extent)?;
    }
    map_window(&mut mapper, &mut map, &kfs, &mut cache, schedule.final_refine, None)?;
    mapper.sync(&map);

    let estimated: Vec<(usize, PoseSE3)> = kfs.iter().map(|k| (kf_frames[k.id as usize], k.pose)).collect();
    let ground_truth: Vec<(usize, PoseSE3)> = estimated.iter().map(|&(f, _)| (f, scene.poses[f])).collect();
    let est: Vec<PoseSE3> = estimated.iter().map(|p| p.1).collect();
    let gt: Vec<PoseSE3> = ground_truth.iter().map(|p| p.1).collect();
    let ate = if est.len() >= 3 { Some(ate_rmse(&est, &gt)?) } else { None };

    let mut views = Vec::new();
    for &f in &held_out {
        let r = rasterize(&map, &scene.poses[f], &scene.intrinsics);
        let target = &scene.renders[f].color;
        let p = psnr(&r.color, target)?;
        views.push(ViewMetrics { frame: f, psnr: p.is_finite().then_some(p), ssim: ssim(&r.color, target)? });
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mean_psnr = mean(views.iter().filter_map(|v| v.psnr).collect());
    let mean_ssim = mean(views.iter().map(|v| v.ssim).collect());

    let (depth_abs_rel_median, depth_abs_rel_mean) = keyframe_depth_error(&map, &kfs, &kf_frames, scene)
        .map_or((None, None), |(m, a)| (Some(m), Some(a)));

    let report = SlamReport {
        ate_rmse: ate,
        held_out: views,
        mean_psnr,
        mean_ssim,
        depth_abs_rel_median,
        depth_abs_rel_mean,
        keyframes: estimated.iter().map(|p| p.0).collect(),
        map_size_history: mapper.size_history.clone(),
        final_map_size: map.len(),
        mapping_iterations: mapper.iteration,
        tracking_final_loss,
        management_events: mapper.events.len(),
        mapping_disabled: schedule.mapping_disabled(),
        aborted,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(SlamRun {
        report,
        map,
        estimated,
        ground_truth,
        mapping_curve: mapper.curve,
        tracking_curve,
        management: mapper.events,
    })
}

/// Multi-pose refinement with the map frozen: every window pose except the two gauge
/// keyframes is re-tracked against its older neighbors.
fn refine_window_poses(
    map: &GaussianMap,
    kfs: &mut [Keyframe],
    kf_frames: &[usize],
    cache: &mut FlowCache<'_>,
    cfg: &LossConfig,
    schedule: &Schedule,
    extent: f64,
) -> Result<()> {
    if schedule.refine_iters == 0 {
        return Ok(());
    }
    let lo = kfs.len().saturating_sub(schedule.window).max(2);
    for _ in 0..schedule.refine_sweeps {
        for id in lo..kfs.len() {
            let prev: Vec<usize> = (id.saturating_sub(2)..id).rev().collect();
            let renders: Vec<_> = prev.iter().map(|&p| rasterize(map, &kfs[p].pose, &kfs[p].intrinsics)).collect();
            for &p in &prev {
                cache.get(kf_frames[p], kf_frames[id]);
            }
            let sources: Vec<FlowSource<'_>> = prev
                .iter()
                .zip(&renders)
                .map(|(&p, r)| FlowSource { render: r, observed: Some(&cache.flows[&(kf_frames[p], kf_frames[id])]) })
                .collect();
            let tracked = track_pose(map, &kfs[id], &sources, cfg, &schedule.lr, extent, schedule.refine_iters, 0)?;
            // keep the refined pose only if it lowered the objective
            let first = tracked.losses.first().copied().unwrap_or(f64::INFINITY);
            let opts = BackwardOptions::default();
            let mut candidate = kfs[id].clone();
            candidate.pose = tracked.pose;
            let after = tracking_objective(map, &candidate, &sources, cfg, &opts)?.total;
            if after < first {
                kfs[id].pose = tracked.pose;
            }
        }
    }
    Ok(())
}

/// Median and mean depth abs-rel over all keyframes, against ground-truth depth, on pixels
/// both renders cover.
pub fn keyframe_depth_error(
    map: &GaussianMap,
    kfs: &[Keyframe],
    kf_frames: &[usize],
    scene: &Scene,
) -> Option<(f64, f64)> {
    let mut est_all = Vec::new();
    let mut gt_all = Vec::new();
    for k in kfs {
        let f = kf_frames[k.id as usize];
        let r = rasterize(map, &k.pose, &k.intrinsics);
        let g = &scene.renders[f];
        for j in 0..r.depth.len() {
            if r.silhouette[j] > LOW_SILHOUETTE && g.silhouette[j] > LOW_SILHOUETTE {
                est_all.push(r.depth[j]);
                gt_all.push(g.depth[j]);
            }
        }
    }
    let n = est_all.len();
    let est = gsflow_core::ScalarMap::from_vec(n, 1, est_all);
    let gt = gsflow_core::ScalarMap::from_vec(n, 1, gt_all);
    depth_abs_rel(&est, &gt, |_| true)
}
