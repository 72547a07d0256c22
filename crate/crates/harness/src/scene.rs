//! Deterministic synthetic scenes and camera trajectories.

use std::f64::consts::PI;
use std::str::FromStr;

use gsflow_core::config::ConfigFields;
use gsflow_core::{rasterize, CameraIntrinsics, Gaussian3D, GaussianMap, PoseSE3, RenderOutputs};
use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

/// Fraction of pixels that must be covered (silhouette > 0.5) in every frame.
pub const MIN_COVERAGE: f64 = 0.95;
const COVERED_SILHOUETTE: f64 = 0.5;
const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Wall,
    Room,
    RandomBlobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    /// Independent uniform colors per Gaussian.
    Random,
    /// Smooth stripes over the world position plus a little per-Gaussian noise.
    Pattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Orbit,
    Line,
    Lissajous,
}

macro_rules! keyword_enum {
    ($t:ty, $what:literal, $($name:literal => $v:expr),* $(,)?) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)*
                    _ => Err(format!(concat!("unknown ", $what, " {:?}"), s)),
                }
            }
        }
        impl $t {
            pub fn name(self) -> &'static str {
                match self {
                    $(v if v == $v => $name,)*
                    _ => unreachable!(),
                }
            }
        }
    };
}

keyword_enum!(Layout, "layout", "wall" => Layout::Wall, "room" => Layout::Room, "random-blobs" => Layout::RandomBlobs);
keyword_enum!(ColorMode, "color mode", "random" => ColorMode::Random, "pattern" => ColorMode::Pattern);
keyword_enum!(
    TrajectoryKind,
    "trajectory",
    "orbit" => TrajectoryKind::Orbit,
    "line" => TrajectoryKind::Line,
    "lissajous" => TrajectoryKind::Lissajous,
);

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_gaussians: usize,
    /// Viewing distance to the scene; every length in the scene scales with it.
    pub extent: f64,
    pub layout: Layout,
    pub color_mode: ColorMode,
    pub trajectory: TrajectoryKind,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Standard deviation of additive flow noise (px).
    pub flow_noise: f64,
    /// Probability that an observed flow pixel carries zero confidence.
    pub confidence_dropout: f64,
    /// Camera travel as a fraction of `extent`.
    pub motion: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_gaussians: 400,
            extent: 4.0,
            layout: Layout::Wall,
            color_mode: ColorMode::Random,
            trajectory: TrajectoryKind::Line,
            n_frames: 33,
            width: 64,
            height: 48,
            focal: 60.0,
            flow_noise: 0.0,
            confidence_dropout: 0.0,
            motion: 0.25,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Generation(m.into()));
        if self.n_gaussians < 1 {
            return bad("n_gaussians must be at least 1");
        }
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2");
        }
        if !(self.extent > 0.0 && self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return bad("extent, focal and image size must be positive");
        }
        if !(self.flow_noise >= 0.0) || !(0.0..=1.0).contains(&self.confidence_dropout) || !(self.motion >= 0.0) {
            return bad("noise parameters out of range");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let mut k = CameraIntrinsics::simple(self.width, self.height, self.focal);
        k.near = 0.01 * self.extent;
        k.far = 100.0 * self.extent;
        k
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("bad value {value:?}: {e}"))
}

impl ConfigFields for SceneSpec {
    fn assign(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
        Some(match key {
            "n_gaussians" => parse(value).map(|v| self.n_gaussians = v),
            "extent" => parse(value).map(|v| self.extent = v),
            "layout" => parse(value).map(|v| self.layout = v),
            "color_mode" => parse(value).map(|v| self.color_mode = v),
            "trajectory" => parse(value).map(|v| self.trajectory = v),
            "n_frames" => parse(value).map(|v| self.n_frames = v),
            "width" => parse(value).map(|v| self.width = v),
            "height" => parse(value).map(|v| self.height = v),
            "focal" => parse(value).map(|v| self.focal = v),
            "flow_noise" => parse(value).map(|v| self.flow_noise = v),
            "confidence_dropout" => parse(value).map(|v| self.confidence_dropout = v),
            "motion" => parse(value).map(|v| self.motion = v),
            "seed" => parse(value).map(|v| self.seed = v),
            _ => return None,
        })
    }
}

/// Ground truth for one generated scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub map: GaussianMap,
    pub poses: Vec<PoseSE3>,
    pub renders: Vec<RenderOutputs>,
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.poses.len()
    }
}

/// Image-plane half extents (world units per unit depth) the trajectory can see.
fn view_half_extents(spec: &SceneSpec) -> (f64, f64) {
    let hx = 0.5 * spec.width as f64 / spec.focal;
    let hy = 0.5 * spec.height as f64 / spec.focal;
    (hx, hy)
}

pub fn trajectory(spec: &SceneSpec) -> Vec<PoseSE3> {
    let e = spec.extent;
    let a = spec.motion * e;
    let up = Vector3::new(0.0, -1.0, 0.0);
    let target = Vector3::new(0.0, 0.0, e);
    let n = spec.n_frames;
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            match spec.trajectory {
                TrajectoryKind::Line => {
                    let eye = Vector3::new(a * (t - 0.5), 0.0, 0.0);
                    PoseSE3::look_at(eye, eye + Vector3::new(0.0, 0.0, e), up)
                }
                TrajectoryKind::Orbit => {
                    // arc of length `a` around the scene center
                    let phi = (t - 0.5) * a / e;
                    let eye = target + e * Vector3::new(phi.sin(), 0.0, -phi.cos());
                    PoseSE3::look_at(eye, target, up)
                }
                TrajectoryKind::Lissajous => {
                    let s = 2.0 * PI * t;
                    let eye = Vector3::new(0.5 * a * s.sin(), 0.25 * a * (2.0 * s).sin(), 0.15 * a * (1.0 - s.cos()));
                    let look = target + Vector3::new(0.1 * a * s.cos(), 0.0, 0.0);
                    PoseSE3::look_at(eye, look, up)
                }
            }
        })
        .collect()
}

/// Rotation taking local z to `normal`, followed by a spin `psi` about it.
fn facing(normal: &Vector3<f64>, psi: f64) -> Quaternion<f64> {
    let align = UnitQuaternion::rotation_between(&Vector3::z(), normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI));
    let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), psi);
    (align * spin).into_inner()
}

fn color(spec: &SceneSpec, rng: &mut ChaCha8Rng, p: &Vector3<f64>) -> Vector3<f64> {
    match spec.color_mode {
        ColorMode::Random => Vector3::new(rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)),
        ColorMode::Pattern => {
            let f = 2.0 * PI / spec.extent;
            let base = Vector3::new(
                0.5 + 0.35 * (3.0 * f * p.x).sin(),
                0.5 + 0.35 * (2.0 * f * p.y + 1.0).sin(),
                0.5 + 0.35 * (f * (p.x + p.y + p.z)).cos(),
            );
            let noise = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            (base + noise).map(|v| v.clamp(0.02, 0.98))
        }
    }
}

/// A flat Gaussian centered at `p` on a surface with the given normal.
fn surfel(spec: &SceneSpec, rng: &mut ChaCha8Rng, p: Vector3<f64>, normal: Vector3<f64>, spacing: f64) -> Result<Gaussian3D> {
    let sigma = 0.65 * spacing * rng.random_range(0.85..1.2);
    let aspect: f64 = rng.random_range(0.75..1.33);
    let scale = Vector3::new(sigma * aspect.sqrt(), sigma / aspect.sqrt(), 0.05 * spacing);
    let q = facing(&normal, rng.random_range(0.0..PI));
    let c = color(spec, rng, &p);
    Ok(Gaussian3D::new(p, q, scale, rng.random_range(0.85..0.97), c, 0)?)
}

fn jittered_grid(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<(f64, f64)> {
    let nx = ((n as f64 * w / h).sqrt().round() as usize).max(1);
    let ny = n.div_ceil(nx).max(1);
    let (dx, dy) = (w / nx as f64, h / ny as f64);
    let mut cells: Vec<(usize, usize)> = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).collect();
    // keep exactly n cells, dropping a random subset
    while cells.len() > n {
        let k = rng.random_range(0..cells.len());
        cells.swap_remove(k);
    }
    cells.sort_unstable();
    cells
        .into_iter()
        .map(|(x, y)| {
            (
                (x as f64 + rng.random_range(0.2..0.8)) * dx - 0.5 * w,
                (y as f64 + rng.random_range(0.2..0.8)) * dy - 0.5 * h,
            )
        })
        .collect()
}

fn build_map(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<GaussianMap> {
    let e = spec.extent;
    let (hx, hy) = view_half_extents(spec);
    let margin = 1.0 + 1.5 * spec.motion;
    let n = spec.n_gaussians;
    let mut gs = Vec::with_capacity(n);
    match spec.layout {
        Layout::Wall => {
            let (w, h) = (2.0 * hx * e * margin, 2.0 * hy * e * margin);
            let spacing = (w * h / n as f64).sqrt();
            for (x, y) in jittered_grid(rng, n, w, h) {
                let z = e + rng.random_range(-0.01..0.01) * spacing;
                gs.push(surfel(spec, rng, Vector3::new(x, y, z), -Vector3::z(), spacing)?);
            }
        }
        Layout::Room => {
            let depth = 1.5 * e;
            let (x0, y0) = (hx * depth * margin, hy * depth * margin);
            let z0 = 0.5 * e;
            // back wall, two side walls, floor and ceiling
            let faces = [
                (2.0 * x0 * 2.0 * y0, 0),
                ((depth - z0) * 2.0 * y0, 1),
                ((depth - z0) * 2.0 * y0, 2),
                ((depth - z0) * 2.0 * x0, 3),
                ((depth - z0) * 2.0 * x0, 4),
            ];
            let total: f64 = faces.iter().map(|f| f.0).sum();
            let spacing = (total / n as f64).sqrt();
            let mut remaining = n;
            for (idx, &(area, face)) in faces.iter().enumerate() {
                let count = if idx + 1 == faces.len() { remaining } else { ((area / total) * n as f64).round() as usize };
                let count = count.min(remaining);
                remaining -= count;
                if count == 0 {
                    continue;
                }
                let (w, h) = match face {
                    0 => (2.0 * x0, 2.0 * y0),
                    1 | 2 => (depth - z0, 2.0 * y0),
                    _ => (2.0 * x0, depth - z0),
                };
                let zc = 0.5 * (depth + z0);
                for (u, v) in jittered_grid(rng, count, w, h) {
                    let (p, normal) = match face {
                        0 => (Vector3::new(u, v, depth), -Vector3::z()),
                        1 => (Vector3::new(-x0, v, zc + u), Vector3::x()),
                        2 => (Vector3::new(x0, v, zc + u), -Vector3::x()),
                        3 => (Vector3::new(u, y0, zc + v), -Vector3::y()),
                        _ => (Vector3::new(u, -y0, zc + v), Vector3::y()),
                    };
                    gs.push(surfel(spec, rng, p, normal, spacing)?);
                }
            }
        }
        Layout::RandomBlobs => {
            let (w, h) = (2.0 * hx * e * margin, 2.0 * hy * e * margin);
            let spacing = (w * h / n as f64).sqrt();
            for _ in 0..n {
                let z = e * rng.random_range(0.75..1.25);
                let s = z / e;
                let p = Vector3::new(rng.random_range(-0.5..0.5) * w * s, rng.random_range(-0.5..0.5) * h * s, z);
                let sigma = spacing * s * rng.random_range(0.7..1.3);
                let scale = Vector3::new(sigma, sigma * rng.random_range(0.5..1.0), sigma * rng.random_range(0.5..1.0));
                let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let rot = Rotation3::new(axis.normalize() * rng.random_range(0.0..PI));
                let q = UnitQuaternion::from_rotation_matrix(&rot).into_inner();
                let c = color(spec, rng, &p);
                gs.push(Gaussian3D::new(p, q, scale, rng.random_range(0.8..0.97), c, 0)?);
            }
        }
    }
    Ok(GaussianMap::new(gs))
}

pub fn coverage(render: &RenderOutputs) -> f64 {
    let s = &render.silhouette;
    s.data().iter().filter(|&&v| v > COVERED_SILHOUETTE).count() as f64 / s.len() as f64
}

/// Builds the ground-truth map, trajectory and reference renders. Maps that leave more than
/// 5% of any frame uncovered are resampled from the same random stream.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let k = spec.intrinsics();
    let poses = trajectory(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut worst = 0.0;
    for _ in 0..MAX_RESAMPLES {
        let map = build_map(spec, &mut rng)?;
        let renders: Vec<RenderOutputs> = poses.iter().map(|p| rasterize(&map, p, &k)).collect();
        let cov = renders.iter().map(coverage).fold(1.0, f64::min);
        if cov >= MIN_COVERAGE {
            return Ok(Scene { spec: spec.clone(), intrinsics: k, map, poses, renders });
        }
        worst = f64::max(worst, cov);
    }
    Err(HarnessError::Generation(format!(
        "no map reached {:.0}% coverage in {MAX_RESAMPLES} attempts (best {:.1}%)",
        MIN_COVERAGE * 100.0,
        worst * 100.0
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { n_gaussians: 150, n_frames: 5, seed: 11, ..Default::default() };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.map.gaussians(), b.map.gaussians());
        assert_eq!(a.poses, b.poses);
        assert_eq!(a.renders[3].color, b.renders[3].color);
    }

    #[test]
    fn every_layout_and_trajectory_generates() {
        for layout in [Layout::Wall, Layout::Room, Layout::RandomBlobs] {
            for trajectory in [TrajectoryKind::Orbit, TrajectoryKind::Line, TrajectoryKind::Lissajous] {
                let spec = SceneSpec { n_gaussians: 300, n_frames: 6, layout, trajectory, seed: 2, ..Default::default() };
                let s = generate_scene(&spec).unwrap_or_else(|e| panic!("{layout:?} {trajectory:?}: {e}"));
                assert!(s.renders.iter().all(|r| coverage(r) >= MIN_COVERAGE));
            }
        }
    }

    #[test]
    fn single_blob_orbit_is_always_visible() {
        let spec = SceneSpec { n_gaussians: 1, trajectory: TrajectoryKind::Orbit, n_frames: 8, ..Default::default() };
        let s = generate_scene(&spec).unwrap();
        assert!(s.renders.iter().all(|r| r.projections[0].is_some()));
    }

    #[test]
    fn keywords_parse() {
        assert_eq!("random-blobs".parse::<Layout>().unwrap(), Layout::RandomBlobs);
        assert_eq!(Layout::Room.name(), "room");
        assert!("cube".parse::<Layout>().is_err());
    }
}
