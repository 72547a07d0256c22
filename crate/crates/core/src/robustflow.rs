//! Robust flow residual model and the confidence-weighted flow loss.
//!
//! A residual `r = ‖ζ − X‖` is scored by the inlier posterior of a log-logistic
//! (Fisk) density `f` against a uniform outlier density `ν`:
//!
//! ```text
//! f(r) = (β/α)(r/α)^{β−1} / (1 + (r/α)^β)²
//! ψ(r) = −log(f(r) / (f(r) + ν))
//! L    = Σⱼ qⱼ·ψ(rⱼ)
//! ```

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::config::LossConfig;
use crate::error::{contract, Error, Result};
use crate::flow::FlowField;
use crate::grid::{Grid, ScalarMap, VectorMap};
use crate::numeric::pairwise_sum;

/// Residuals below this get a zero gradient.
pub const RESIDUAL_GRAD_MIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustFlowModel {
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    /// Residual floor applied when `β ≠ 1` (the density is singular or zero at the origin).
    pub epsilon_r: f64,
}

impl RobustFlowModel {
    pub fn new(alpha: f64, beta: f64, nu: f64) -> Result<Self> {
        let m = Self { alpha, beta, nu, epsilon_r: 1e-6 };
        m.validate()?;
        Ok(m)
    }

    pub fn from_config(cfg: &LossConfig, width: usize, height: usize) -> Result<Self> {
        Self::new(cfg.fisk_alpha, cfg.fisk_beta, cfg.nu_for(width, height))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.nu > 0.0 && self.epsilon_r >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid robust flow model {self:?}")));
        }
        Ok(())
    }

    fn effective_residual(&self, r: f64) -> (f64, bool) {
        if self.beta != 1.0 && r < self.epsilon_r {
            (self.epsilon_r, true)
        } else {
            (r, false)
        }
    }

    /// `(ln f(r), d ln f / dr)`; the derivative is 0 inside the floor.
    pub fn log_density(&self, r: f64) -> (f64, f64) {
        let (r, floored) = self.effective_residual(r.max(0.0));
        let (a, b) = (self.alpha, self.beta);
        if b == 1.0 {
            let x = 1.0 + r / a;
            return (-a.ln() - 2.0 * x.ln(), -2.0 / (a + r));
        }
        let ln_ratio = (r / a).ln();
        let u = (b * ln_ratio).exp();
        let ln_f = b.ln() - a.ln() + (b - 1.0) * ln_ratio - 2.0 * u.ln_1p();
        let d = if floored { 0.0 } else { ((b - 1.0) * (1.0 + u) - 2.0 * b * u) / (r * (1.0 + u)) };
        (ln_f, d)
    }

    /// `(ψ(r), dψ/dr)`.
    pub fn psi(&self, r: f64) -> (f64, f64) {
        let (ln_f, dln_f) = self.log_density(r);
        // ψ = ln(1 + ν/f); dψ/dr = −(d ln f/dr)·ν/(f + ν)
        let ratio = self.nu * (-ln_f).exp();
        (ratio.ln_1p(), -dln_f * ratio / (1.0 + ratio))
    }
}

/// Log-logistic density at residual `r ≥ 0`.
pub fn loglogistic_pdf(r: f64, model: &RobustFlowModel) -> f64 {
    model.log_density(r).0.exp()
}

#[derive(Debug, Clone)]
pub struct FlowLossOutput {
    pub total: f64,
    /// Unweighted per-pixel loss ψ (0 where not evaluated).
    pub psi_map: ScalarMap,
    /// `q ⊙ ψ`.
    pub f_map: ScalarMap,
    pub dl_dzeta: VectorMap,
    pub evaluated: Grid<bool>,
}

/// Confidence-weighted robust flow loss of rendered flow `zeta` against `observed`.
///
/// Pixels are evaluated where both fields are valid; the weight is the observed confidence.
pub fn flow_loss(zeta: &FlowField, observed: &FlowField, model: &RobustFlowModel) -> Result<FlowLossOutput> {
    if zeta.width() != observed.width() || zeta.height() != observed.height() {
        return Err(contract(format!(
            "flow fields differ in size: {}x{} vs {}x{}",
            zeta.width(),
            zeta.height(),
            observed.width(),
            observed.height()
        )));
    }
    let (w, h) = (zeta.width(), zeta.height());
    let per_pixel: Vec<(f64, f64, Vector2<f64>, bool)> = (0..w * h)
        .into_par_iter()
        .map(|j| {
            if !(zeta.valid[j] && observed.valid[j]) {
                return (0.0, 0.0, Vector2::zeros(), false);
            }
            let q = observed.confidence[j];
            let diff = zeta.flow[j] - observed.flow[j];
            let r = diff.norm();
            let (psi, dpsi) = model.psi(r);
            let grad = if r < RESIDUAL_GRAD_MIN || q == 0.0 { Vector2::zeros() } else { diff * (q * dpsi / r) };
            (psi, q * psi, grad, true)
        })
        .collect();
    let f_values: Vec<f64> = per_pixel.iter().map(|p| p.1).collect();
    Ok(FlowLossOutput {
        total: pairwise_sum(&f_values),
        psi_map: Grid::from_vec(w, h, per_pixel.iter().map(|p| p.0).collect()),
        f_map: Grid::from_vec(w, h, f_values),
        dl_dzeta: Grid::from_vec(w, h, per_pixel.iter().map(|p| p.2).collect()),
        evaluated: Grid::from_vec(w, h, per_pixel.iter().map(|p| p.3).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(w: usize, h: usize, f: impl Fn(usize) -> Vector2<f64>, q: f64) -> FlowField {
        let mut out = FlowField::zeros(w, h);
        for j in 0..w * h {
            out.flow[j] = f(j);
            out.confidence[j] = q;
            out.valid[j] = true;
        }
        out
    }

    #[test]
    fn pdf_closed_forms() {
        let m = RobustFlowModel::new(2.0, 3.0, 1e-3).unwrap();
        assert!((loglogistic_pdf(2.0, &m) - 3.0 / 8.0).abs() < 1e-15);
        let m1 = RobustFlowModel::new(0.5, 1.0, 1e-3).unwrap();
        assert!((loglogistic_pdf(0.0, &m1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_alignment_gives_log_one_plus_alpha_nu() {
        let m = RobustFlowModel::new(1.0, 1.0, 1e-4).unwrap();
        let z = field(4, 3, |j| Vector2::new(j as f64, -(j as f64)), 1.0);
        let out = flow_loss(&z, &z, &m).unwrap();
        for j in 0..12 {
            assert!((out.psi_map[j] - 1.0001f64.ln()).abs() < 1e-16);
            assert_eq!(out.dl_dzeta[j], Vector2::zeros());
        }
        assert!((out.total - 12.0 * 1.0001f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_confidence_contributes_nothing() {
        let m = RobustFlowModel::new(1.0, 1.0, 1e-2).unwrap();
        let z = field(5, 5, |j| Vector2::new(j as f64 * 0.1, 0.3), 1.0);
        let x = field(5, 5, |_| Vector2::new(1.0, -2.0), 0.0);
        let out = flow_loss(&z, &x, &m).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(out.dl_dzeta.data().iter().all(|g| *g == Vector2::zeros()));
        assert!(out.psi_map.data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn size_mismatch_is_a_contract_violation() {
        let m = RobustFlowModel::new(1.0, 1.0, 1e-2).unwrap();
        let err = flow_loss(&FlowField::zeros(2, 2), &FlowField::zeros(3, 2), &m).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn psi_positive_and_monotone_for_beta_at_most_one() {
        for beta in [0.5, 0.8, 1.0] {
            let m = RobustFlowModel::new(1.5, beta, 1e-3).unwrap();
            let mut prev = -1.0;
            for i in 0..4000 {
                let r = i as f64 * 0.01;
                let (psi, _) = m.psi(r);
                assert!(psi > 0.0);
                assert!(psi >= prev, "beta {beta} r {r}");
                prev = psi;
            }
        }
    }

    #[test]
    fn larger_nu_damps_the_slope() {
        let lo = RobustFlowModel::new(1.0, 1.0, 1e-3).unwrap();
        let hi = RobustFlowModel::new(1.0, 1.0, 1e-1).unwrap();
        for i in 1..400 {
            let r = i as f64 * 0.1;
            // Per unit of outlier mass; the raw slope grows with ν because ψ ≈ ν/f for small ν.
            let (_, d_lo) = lo.psi(r);
            let (_, d_hi) = hi.psi(r);
            assert!(d_hi / hi.nu < d_lo / lo.nu, "r {r}");
        }
    }

    #[test]
    fn f_map_is_confidence_times_psi() {
        let m = RobustFlowModel::new(1.0, 1.0, 1e-2).unwrap();
        let z = field(6, 4, |j| Vector2::new((j as f64).sin() * 3.0, 1.0), 1.0);
        let mut x = field(6, 4, |j| Vector2::new(0.0, (j as f64).cos()), 0.0);
        for j in 0..24 {
            x.confidence[j] = (j as f64) / 24.0;
        }
        let out = flow_loss(&z, &x, &m).unwrap();
        for j in 0..24 {
            assert_eq!(out.f_map[j], x.confidence[j] * out.psi_map[j]);
            assert!(out.f_map[j] >= 0.0);
        }
    }
}
