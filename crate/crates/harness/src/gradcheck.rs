//! End-to-end gradient check of the flow and image losses against central differences.

use std::io::Write;

use gsflow_core::backward::{
    apply_perturbation, backward_image, finite_diff_oracle, flow_backward, gradcheck_rel_err, BackwardOptions,
    MapGradients, ParamClass, ParamCoord,
};
use gsflow_core::objectives::image_loss;
use gsflow_core::robustflow::{flow_loss, RobustFlowModel};
use gsflow_core::{
    pose_retract, rasterize, rasterize_flow, se3_exp, CameraIntrinsics, FlowField, Gaussian3D, GaussianMap, LossConfig,
    PoseSE3, RgbImage, Tangent,
};
use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::oracle::{flow_oracle, FlowNoise};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Pixels whose residual is below this at the evaluation point are left out of the loss.
pub const RESIDUAL_EXCLUSION: f64 = 1e-3;
/// Eigenvalue ratio below which a projected covariance counts as a tie.
pub const TIE_RATIO: f64 = 1.0 + 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Flow,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub loss: LossKind,
    pub coord: ParamCoord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
    /// The perturbation changed which Gaussians blend where, or a tie was present.
    pub non_smooth: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> usize {
        self.rows.iter().filter(|r| r.pass).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        self.passed() as f64 / self.rows.len() as f64
    }

    /// Failures not explained by a non-smooth point.
    pub fn unexplained_failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass && !r.non_smooth).count()
    }

    pub fn extend(&mut self, other: GradcheckReport) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "param_class,gaussian_or_pose_id,coord,analytic,numeric,rel_err,pass")?;
        for r in &self.rows {
            let class = match r.loss {
                LossKind::Flow => r.coord.class.name().to_string(),
                LossKind::Image => format!("image_{}", r.coord.class.name()),
            };
            let id = if r.coord.class.is_pose() { 0 } else { r.coord.index };
            writeln!(
                out,
                "{class},{id},{},{:.12e},{:.12e},{:.3e},{}",
                r.coord.component, r.analytic, r.numeric, r.rel_err, r.pass
            )?;
        }
        Ok(())
    }
}

/// Two-frame problem: a random map and poses, and observed flow from a ground truth
/// that differs from the evaluated state so residuals are non-zero.
#[derive(Debug, Clone)]
pub struct GradcheckProblem {
    pub k: CameraIntrinsics,
    pub map: GaussianMap,
    pub pose_t: PoseSE3,
    pub pose_next: PoseSE3,
    pub observed: FlowField,
    pub target: RgbImage,
    pub cfg: LossConfig,
    pub extent: f64,
}

fn random_gaussian(rng: &mut ChaCha8Rng, extent: f64) -> Gaussian3D {
    let z = extent * rng.random_range(0.7..1.4);
    let mean = Vector3::new(rng.random_range(-0.45..0.45) * z, rng.random_range(-0.45..0.45) * z, z);
    let q = Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let s = extent * 0.04;
    let scale = Vector3::new(s * rng.random_range(0.5..2.5), s * rng.random_range(0.5..2.5), s * rng.random_range(0.5..2.5));
    let color = Vector3::new(rng.random(), rng.random(), rng.random());
    Gaussian3D::new(mean, q / q.norm(), scale, rng.random_range(0.2..0.9), color, 0).expect("valid random Gaussian")
}

impl GradcheckProblem {
    /// `n` Gaussians, `size`×`size` images, relative pose rotation at most 10°.
    pub fn random(seed: u64, n: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extent = 4.0;
        let k = CameraIntrinsics::simple(size, size, size as f64);
        let gt = GaussianMap::new((0..n).map(|_| random_gaussian(&mut rng, extent)).collect());
        let mut unit = || {
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
        };
        let w = unit() * 10f64.to_radians() * 0.999;
        let v = unit() * 0.1 * extent;
        let w0 = unit() * 0.02;
        let pose_t = se3_exp(&Tangent::new(w0.x, w0.y, w0.z, 0.0, 0.0, 0.0));
        let pose_next = pose_retract(&pose_t, &Tangent::new(w.x, w.y, w.z, v.x, v.y, v.z));
        let observed = flow_oracle(&gt, &pose_t, &pose_next, &k, &FlowNoise::default(), &mut rng);
        let target = rasterize(&gt, &pose_t, &k).color;

        // evaluated state: every Gaussian moved, rescaled and re-weighted a little
        let mut map = gt.clone();
        for g in map.gaussians_mut().iter_mut() {
            g.mean += Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.1));
            g.scale *= rng.random_range(0.9..1.1);
            g.opacity_logit += rng.random_range(-0.3..0.3);
            g.color = g.color.map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
        }
        let jitter = Tangent::new(0.005, -0.004, 0.003, 0.01, -0.02, 0.015);
        let pose_next = pose_retract(&pose_next, &jitter);
        Self { k, map, pose_t, pose_next, observed, target, cfg: LossConfig::default(), extent }
    }

    pub fn model(&self) -> RobustFlowModel {
        RobustFlowModel::from_config(&self.cfg, self.k.width, self.k.height).expect("valid loss config")
    }

    /// Observed flow with near-zero-residual pixels at the evaluation point excluded.
    pub fn masked_observed(&self) -> FlowField {
        let r = rasterize(&self.map, &self.pose_t, &self.k);
        let f = rasterize_flow(&self.map, &r, &self.pose_next).expect("fresh render");
        let mut obs = self.observed.clone();
        for j in 0..obs.flow.len() {
            if f.flow.valid[j] && (f.flow.flow[j] - obs.flow[j]).norm() < RESIDUAL_EXCLUSION {
                obs.valid[j] = false;
            }
        }
        obs
    }

    pub fn coords(&self, loss: LossKind) -> Vec<ParamCoord> {
        let classes: &[ParamClass] = match loss {
            LossKind::Flow => &[
                ParamClass::Mean,
                ParamClass::Quat,
                ParamClass::LogScale,
                ParamClass::OpacityLogit,
                ParamClass::PoseT,
                ParamClass::PoseNext,
            ],
            LossKind::Image => &[
                ParamClass::Mean,
                ParamClass::Quat,
                ParamClass::LogScale,
                ParamClass::OpacityLogit,
                ParamClass::Color,
                ParamClass::PoseT,
            ],
        };
        let mut out = Vec::new();
        for &class in classes {
            let count = if class.is_pose() { 1 } else { self.map.len() };
            for index in 0..count {
                for component in 0..class.dims() {
                    out.push(ParamCoord { class, index, component });
                }
            }
        }
        out
    }

    pub fn step(&self, c: &ParamCoord) -> f64 {
        match c.class {
            ParamClass::Mean => 1e-5 * self.extent,
            ParamClass::PoseT | ParamClass::PoseNext if c.component >= 3 => 1e-5 * self.extent,
            _ => 1e-5,
        }
    }
}

#[derive(Clone)]
struct State {
    map: GaussianMap,
    pose_t: PoseSE3,
    pose_next: PoseSE3,
}

fn perturb(s: &mut State, c: &ParamCoord, h: f64) {
    apply_perturbation(&mut s.map, &mut s.pose_t, &mut s.pose_next, c, h);
}

fn pick(m: &MapGradients, dt: &Tangent, dn: &Tangent, c: &ParamCoord) -> f64 {
    match c.class {
        ParamClass::Mean => m.d_mean[c.index][c.component],
        ParamClass::Quat => m.d_quat[c.index][c.component],
        ParamClass::LogScale => m.d_log_scale[c.index][c.component],
        ParamClass::OpacityLogit => m.d_opacity_logit[c.index],
        ParamClass::Color => m.d_color[c.index][c.component],
        ParamClass::PoseT => dt[c.component],
        ParamClass::PoseNext => dn[c.component],
    }
}

type Structure = (Vec<(u32, bool)>, Vec<usize>, Vec<bool>, Vec<i8>);

/// Discrete structure of a render: which Gaussians blend at each pixel, whether they clamp,
/// flow validity, and the L1 residual signs against `target`.
fn structure(s: &State, k: &CameraIntrinsics, with_flow: bool, target: Option<&RgbImage>) -> Structure {
    let r = rasterize(&s.map, &s.pose_t, k);
    let entries = r.records.iter().map(|(_, e)| (e.gaussian, e.clamped)).collect();
    let counts = (0..r.records.num_pixels()).map(|j| r.records.pixel(j).len()).collect();
    let valid = if with_flow {
        rasterize_flow(&s.map, &r, &s.pose_next).map(|f| f.flow.valid.into_vec()).unwrap_or_default()
    } else {
        Vec::new()
    };
    let signs = match target {
        Some(t) => r
            .color
            .data()
            .iter()
            .zip(t.data())
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).partial_cmp(&0.0).map_or(0, |o| o as i8)))
            .collect(),
        None => Vec::new(),
    };
    (entries, counts, valid, signs)
}

fn has_tie(s: &State, k: &CameraIntrinsics) -> bool {
    let r = rasterize(&s.map, &s.pose_t, k);
    r.projections.iter().flatten().any(|p| p.decomp.s[0] < TIE_RATIO * p.decomp.s[1])
}

/// Checks every coordinate of every parameter class for one loss.
pub fn check(problem: &GradcheckProblem, loss: LossKind) -> Result<GradcheckReport> {
    let k = problem.k;
    let state = State { map: problem.map.clone(), pose_t: problem.pose_t, pose_next: problem.pose_next };
    let coords = problem.coords(loss);
    let opts = BackwardOptions::default();
    let model = problem.model();
    let observed = problem.masked_observed();
    let lambda = problem.cfg.lambda_dssim;

    let analytic: Vec<f64> = match loss {
        LossKind::Flow => {
            let r = rasterize(&state.map, &state.pose_t, &k);
            let f = rasterize_flow(&state.map, &r, &state.pose_next)?;
            let l = flow_loss(&f.flow, &observed, &model)?;
            let b = flow_backward(&state.map, &r, &f, &l.dl_dzeta, &opts)?;
            coords.iter().map(|c| pick(&b.map, &b.pose.d_tau_t, &b.pose.d_tau_next, c)).collect()
        }
        LossKind::Image => {
            let r = rasterize(&state.map, &state.pose_t, &k);
            let l = image_loss(&r.color, &problem.target, lambda)?;
            let (g, dt) = backward_image(&l.dl_dpixel, &state.map, &r, &opts)?;
            coords.iter().map(|c| pick(&g, &dt, &Tangent::zeros(), c)).collect()
        }
    };
    let evaluate = |s: &State| -> gsflow_core::Result<f64> {
        let r = rasterize(&s.map, &s.pose_t, &k);
        match loss {
            LossKind::Flow => {
                let f = rasterize_flow(&s.map, &r, &s.pose_next)?;
                Ok(flow_loss(&f.flow, &observed, &model)?.total)
            }
            LossKind::Image => Ok(image_loss(&r.color, &problem.target, lambda)?.total),
        }
    };
    let numeric = finite_diff_oracle(&state, &coords, |c| problem.step(c), perturb, evaluate)?;

    let with_flow = loss == LossKind::Flow;
    let target = (!with_flow).then_some(&problem.target);
    let base = structure(&state, &k, with_flow, target);
    let tie = has_tie(&state, &k);
    let rows = coords
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(c, (&a, &n))| {
            let rel_err = gradcheck_rel_err(a, n);
            let pass = rel_err <= GRADCHECK_TOLERANCE;
            let non_smooth = !pass && {
                let h = problem.step(c);
                let mut plus = state.clone();
                perturb(&mut plus, c, h);
                let mut minus = state.clone();
                perturb(&mut minus, c, -h);
                tie || structure(&plus, &k, with_flow, target) != base || structure(&minus, &k, with_flow, target) != base
            };
            GradcheckRow { loss, coord: *c, analytic: a, numeric: n, rel_err, pass, non_smooth }
        })
        .collect();
    Ok(GradcheckReport { rows })
}

/// Flow and image checks on one random problem.
pub fn run_gradcheck(seed: u64, n_gaussians: usize, size: usize) -> Result<GradcheckReport> {
    let problem = GradcheckProblem::random(seed, n_gaussians, size);
    let mut report = check(&problem, LossKind::Flow)?;
    report.extend(check(&problem, LossKind::Image)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes_on_small_problem() {
        let report = run_gradcheck(1, 30, 32).unwrap();
        assert!(report.rows.iter().any(|r| r.loss == LossKind::Flow && r.coord.class == ParamClass::PoseNext));
        assert!(report.pass_fraction() >= 0.995, "pass fraction {}", report.pass_fraction());
        assert_eq!(report.unexplained_failures(), 0);
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let problem = GradcheckProblem::random(2, 5, 16);
        let report = check(&problem, LossKind::Flow).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("param_class,gaussian_or_pose_id,coord,analytic,numeric,rel_err,pass\n"));
        assert_eq!(text.lines().count(), report.rows.len() + 1);
    }
}
