use nalgebra::{Quaternion, Vector3, Vector6};

use crate::backward::MapGradients;
use crate::config::LearningRates;
use crate::se3::{pose_retract, PoseSE3};
use crate::splat::GaussianMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Scalars per Gaussian: mean 3, quaternion 4, log-scale 3, logit opacity 1, color 3.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// One bias-corrected Adam update on `x` in place. `t` is the 1-based step number.
pub fn adam_update(x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..x.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        x[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Per-class learning rates in the order mean, quaternion, log-scale, logit, color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapLearningRates {
    pub mean: f64,
    pub quat: f64,
    pub log_scale: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl MapLearningRates {
    pub fn from_config(lr: &LearningRates, scene_extent: f64) -> Self {
        Self {
            mean: lr.lr_mean * scene_extent,
            quat: lr.lr_quat,
            log_scale: lr.lr_log_scale,
            opacity_logit: lr.lr_opacity_logit,
            color: lr.lr_color,
        }
    }

    fn per_scalar(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].fill(self.mean);
        out[3..7].fill(self.quat);
        out[7..10].fill(self.log_scale);
        out[10] = self.opacity_logit;
        out[11..14].fill(self.color);
        out
    }
}

/// Adam state for the map, one moment pair per Gaussian scalar.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: MapLearningRates,
    m: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    v: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    step: u64,
    skipped: u64,
}

impl OptimizerState {
    pub fn new(n: usize, lr: MapLearningRates) -> Self {
        Self {
            lr,
            m: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            v: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            step: 0,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total Gaussian updates skipped for non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn moments(&self, i: usize) -> (&[f64; PARAMS_PER_GAUSSIAN], &[f64; PARAMS_PER_GAUSSIAN]) {
        (&self.m[i], &self.v[i])
    }

    /// Rebuilds the moment buffers after the map was restructured: new Gaussian `i`
    /// inherits the moments of old Gaussian `origin[i]`, or starts from zero.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let zero = [0.0; PARAMS_PER_GAUSSIAN];
        self.m = origin.iter().map(|o| o.map_or(zero, |k| self.m[k])).collect();
        self.v = origin.iter().map(|o| o.map_or(zero, |k| self.v[k])).collect();
    }

    /// One Adam step over all Gaussians. Returns how many Gaussians were skipped because
    /// their gradient was not finite.
    pub fn step(&mut self, map: &mut GaussianMap, grads: &MapGradients) -> usize {
        assert_eq!(map.len(), self.m.len(), "optimizer state does not match the map");
        assert_eq!(map.len(), grads.len(), "gradients do not match the map");
        self.step += 1;
        let lr = self.lr.per_scalar();
        let mut skipped = 0;
        let t = self.step;
        for (i, g) in map.gaussians_mut().iter_mut().enumerate() {
            if !grads.is_finite_at(i) {
                skipped += 1;
                continue;
            }
            let mut grad = [0.0; PARAMS_PER_GAUSSIAN];
            grad[0..3].copy_from_slice(grads.d_mean[i].as_slice());
            grad[3..7].copy_from_slice(grads.d_quat[i].as_slice());
            grad[7..10].copy_from_slice(grads.d_log_scale[i].as_slice());
            grad[10] = grads.d_opacity_logit[i];
            grad[11..14].copy_from_slice(grads.d_color[i].as_slice());

            let q = g.rotation;
            let mut x = [0.0; PARAMS_PER_GAUSSIAN];
            x[0..3].copy_from_slice(g.mean.as_slice());
            x[3..7].copy_from_slice(&[q.w, q.i, q.j, q.k]);
            x[7..10].copy_from_slice(g.scale.map(f64::ln).as_slice());
            x[10] = g.opacity_logit;
            x[11..14].copy_from_slice(g.color.as_slice());
            let before = x;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..PARAMS_PER_GAUSSIAN {
                if lr[k] != 0.0 {
                    adam_update(&mut x[k..k + 1], &grad[k..k + 1], &mut m[k..k + 1], &mut v[k..k + 1], lr[k], t);
                }
            }
            if x == before {
                continue;
            }
            g.mean.copy_from_slice(&x[0..3]);
            let q = Quaternion::new(x[3], x[4], x[5], x[6]);
            let norm = q.norm();
            if norm > 0.0 && norm.is_finite() {
                g.rotation = q / norm;
            }
            for k in 0..3 {
                g.scale[k] = x[7 + k].exp();
            }
            g.opacity_logit = x[10];
            g.color.copy_from_slice(&x[11..14]);
        }
        self.skipped += skipped as u64;
        skipped
    }
}

/// Adam on a pose's left se(3) increment.
///
/// The moments live in a pivoted tangent `(ω, u)` whose rotation turns the camera about
/// `pivot` (camera coordinates) instead of its center: `v = u + pivot × ω`. A pivot near
/// the observed scene decouples rotation from translation for narrow fields of view; the
/// zero pivot is the plain increment.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseOptimizer {
    pub lr_rot: f64,
    pub lr_trans: f64,
    pub pivot: Vector3<f64>,
    m: Vector6<f64>,
    v: Vector6<f64>,
    step: u64,
}

impl PoseOptimizer {
    pub fn new(lr_rot: f64, lr_trans: f64) -> Self {
        Self { lr_rot, lr_trans, pivot: Vector3::zeros(), m: Vector6::zeros(), v: Vector6::zeros(), step: 0 }
    }

    pub fn from_config(lr: &LearningRates, scene_extent: f64) -> Self {
        Self::new(lr.lr_pose_rot, lr.lr_pose_trans * scene_extent)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Returns the updated pose; a non-finite gradient leaves the pose unchanged.
    pub fn step(&mut self, pose: &PoseSE3, d_tau: &Vector6<f64>) -> PoseSE3 {
        self.step += 1;
        if !d_tau.iter().all(|v| v.is_finite()) {
            return *pose;
        }
        let g_w = Vector3::new(d_tau[0], d_tau[1], d_tau[2]);
        let g_v = Vector3::new(d_tau[3], d_tau[4], d_tau[5]);
        let g_w = g_w - self.pivot.cross(&g_v);
        let g = [g_w.x, g_w.y, g_w.z, g_v.x, g_v.y, g_v.z];
        let mut x = [0.0; 6];
        for k in 0..6 {
            let lr = if k < 3 { self.lr_rot } else { self.lr_trans };
            adam_update(
                &mut x[k..k + 1],
                &[g[k]],
                &mut self.m.as_mut_slice()[k..k + 1],
                &mut self.v.as_mut_slice()[k..k + 1],
                lr,
                self.step,
            );
        }
        let w = Vector3::new(x[0], x[1], x[2]);
        let v = Vector3::new(x[3], x[4], x[5]) + self.pivot.cross(&w);
        pose_retract(pose, &Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z))
    }
}
