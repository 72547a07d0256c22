use std::fmt;

use crate::error::{contract, Result};
use crate::se3::{pose_retract, PoseSE3, Tangent};
use crate::splat::GaussianMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Mean,
    Quat,
    LogScale,
    OpacityLogit,
    Color,
    PoseT,
    PoseNext,
}

impl ParamClass {
    pub const ALL: [ParamClass; 7] = [
        ParamClass::Mean,
        ParamClass::Quat,
        ParamClass::LogScale,
        ParamClass::OpacityLogit,
        ParamClass::Color,
        ParamClass::PoseT,
        ParamClass::PoseNext,
    ];

    pub fn dims(self) -> usize {
        match self {
            ParamClass::Mean | ParamClass::LogScale | ParamClass::Color => 3,
            ParamClass::Quat => 4,
            ParamClass::OpacityLogit => 1,
            ParamClass::PoseT | ParamClass::PoseNext => 6,
        }
    }

    pub fn is_pose(self) -> bool {
        matches!(self, ParamClass::PoseT | ParamClass::PoseNext)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Mean => "mean",
            ParamClass::Quat => "quat",
            ParamClass::LogScale => "log_scale",
            ParamClass::OpacityLogit => "opacity_logit",
            ParamClass::Color => "color",
            ParamClass::PoseT => "tau_t",
            ParamClass::PoseNext => "tau_next",
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One scalar coordinate of the map or of a pose. `index` is the Gaussian index and is
/// ignored for pose classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub class: ParamClass,
    pub index: usize,
    pub component: usize,
}

/// Adds `h` to one coordinate. Quaternions are perturbed in raw `(w, i, j, k)` components,
/// scales and opacities in their log/logit parameterization, poses through
/// [`pose_retract`].
pub fn apply_perturbation(
    map: &mut GaussianMap,
    pose_t: &mut PoseSE3,
    pose_next: &mut PoseSE3,
    coord: &ParamCoord,
    h: f64,
) {
    let c = coord.component;
    match coord.class {
        ParamClass::PoseT | ParamClass::PoseNext => {
            let mut tau = Tangent::zeros();
            tau[c] = h;
            let pose = if coord.class == ParamClass::PoseT { pose_t } else { pose_next };
            *pose = pose_retract(pose, &tau);
        }
        class => {
            let g = &mut map.gaussians_mut()[coord.index];
            match class {
                ParamClass::Mean => g.mean[c] += h,
                ParamClass::Quat => g.rotation.coords[(c + 3) % 4] += h,
                ParamClass::LogScale => g.scale[c] *= h.exp(),
                ParamClass::OpacityLogit => g.opacity_logit += h,
                ParamClass::Color => g.color[c] += h,
                _ => unreachable!(),
            }
        }
    }
}

/// Central-difference gradient `(L(x + h) − L(x − h)) / 2h` for each coordinate.
///
/// `perturb(state, coord, h)` must apply an additive step in the coordinate's chart. The
/// loss is evaluated twice at the unperturbed state first; differing results mean the
/// evaluator is not deterministic and the oracle refuses to produce a gradient.
pub fn finite_diff_oracle<S, C, P, L>(state: &S, coords: &[C], step: impl Fn(&C) -> f64, perturb: P, loss: L) -> Result<Vec<f64>>
where
    S: Clone,
    P: Fn(&mut S, &C, f64),
    L: Fn(&S) -> Result<f64>,
{
    let a = loss(state)?;
    let b = loss(state)?;
    if a.to_bits() != b.to_bits() && !(a.is_nan() && b.is_nan()) {
        return Err(contract(format!("loss evaluator is not deterministic: {a} then {b}")));
    }
    coords
        .iter()
        .map(|c| {
            let h = step(c);
            let mut plus = state.clone();
            perturb(&mut plus, c, h);
            let mut minus = state.clone();
            perturb(&mut minus, c, -h);
            Ok((loss(&plus)? - loss(&minus)?) / (2.0 * h))
        })
        .collect()
}

/// Relative error used by gradient checks: `|a − n| / max(1, |a|, |n|)`.
pub fn gradcheck_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}
