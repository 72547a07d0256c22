//! Loss weights, management thresholds, learning rates, and the `key = value`
//! configuration file format shared by all of them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Flow weight in the tracking objective.
    pub lambda1: f64,
    /// Flow weight in the mapping objective.
    pub lambda2: f64,
    /// Isotropic regularizer weight.
    pub lambda3: f64,
    /// Opacity-entropy regularizer weight.
    pub lambda4: f64,
    pub lambda_dssim: f64,
    /// Log-logistic scale (pixels).
    pub fisk_alpha: f64,
    /// Log-logistic shape.
    pub fisk_beta: f64,
    /// Uniform outlier density (1/px²). `None` means `1 / (4·W·H)` for the image at hand.
    pub nu: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 1.0,
            lambda4: 0.01,
            lambda_dssim: 0.2,
            fisk_alpha: 1.0,
            fisk_beta: 1.0,
            nu: None,
        }
    }
}

impl LossConfig {
    pub fn nu_for(&self, width: usize, height: usize) -> f64 {
        self.nu.unwrap_or(1.0 / (4.0 * width as f64 * height as f64))
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda_dssim];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("loss weights must be non-negative".into()));
        }
        if !(self.fisk_alpha > 0.0 && self.fisk_beta > 0.0) {
            return Err(Error::InvalidParameter("fisk_alpha and fisk_beta must be positive".into()));
        }
        if let Some(nu) = self.nu {
            if !(nu > 0.0) {
                return Err(Error::InvalidParameter("nu must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManagementConfig {
    pub eta_s1: f64,
    pub eta_s2: f64,
    pub eta_r1: f64,
    pub eta_r2: f64,
    pub eta_r3: f64,
    pub eta_r4: f64,
    pub eta_g1: f64,
    pub eta_p1: f64,
    pub eta_p2: f64,
    pub eta_p3: f64,
    pub eta_o1: f64,
}

impl Default for ManagementConfig {
    fn default() -> Self {
        Self {
            eta_s1: 0.2,
            eta_s2: 0.1,
            eta_r1: 10.0,
            eta_r2: 40.0,
            eta_r3: 5.0,
            eta_r4: 7.0,
            eta_g1: 0.0001,
            eta_p1: 0.6,
            eta_p2: 0.2,
            eta_p3: 1.5,
            eta_o1: 0.05,
        }
    }
}

impl ManagementConfig {
    /// Every threshold at `+∞`; no mask can fire.
    pub fn disabled() -> Self {
        let inf = f64::INFINITY;
        Self {
            eta_s1: inf,
            eta_s2: inf,
            eta_r1: inf,
            eta_r2: inf,
            eta_r3: 0.0,
            eta_r4: 0.0,
            eta_g1: 0.0,
            eta_p1: inf,
            eta_p2: inf,
            eta_p3: inf,
            eta_o1: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.eta_s1, self.eta_s2, self.eta_r1, self.eta_r2, self.eta_r3, self.eta_r4, self.eta_g1,
            self.eta_p1, self.eta_p2, self.eta_p3, self.eta_o1,
        ];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter("thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-class Adam learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub lr_mean: f64,
    pub lr_log_scale: f64,
    pub lr_quat: f64,
    pub lr_opacity_logit: f64,
    pub lr_color: f64,
    pub lr_pose_rot: f64,
    /// Multiplied by the scene extent.
    pub lr_pose_trans: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            lr_mean: 1.6e-4,
            lr_log_scale: 5e-3,
            lr_quat: 1e-3,
            lr_opacity_logit: 5e-2,
            lr_color: 2.5e-3,
            lr_pose_rot: 2e-3,
            lr_pose_trans: 2e-3,
        }
    }
}

/// A struct whose fields can be assigned from `key = value` lines.
pub trait ConfigFields {
    /// Returns `None` when `key` is not one of this struct's fields.
    fn assign(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>>;
}

fn parse_f64(value: &str) -> std::result::Result<f64, String> {
    match value {
        "inf" | "+inf" => Ok(f64::INFINITY),
        _ => value.parse::<f64>().map_err(|e| format!("bad number {value:?}: {e}")),
    }
}

macro_rules! assign_f64 {
    ($self:ident, $key:ident, $value:ident; $($field:ident),* $(,)?) => {
        match $key {
            $(stringify!($field) => Some(parse_f64($value).map(|v| $self.$field = v)),)*
            _ => None,
        }
    };
}

impl ConfigFields for LossConfig {
    fn assign(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
        if key == "nu" {
            return Some(parse_f64(value).map(|v| self.nu = Some(v)));
        }
        assign_f64!(self, key, value; lambda1, lambda2, lambda3, lambda4, lambda_dssim, fisk_alpha, fisk_beta)
    }
}

impl ConfigFields for ManagementConfig {
    fn assign(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
        assign_f64!(self, key, value;
            eta_s1, eta_s2, eta_r1, eta_r2, eta_r3, eta_r4, eta_g1, eta_p1, eta_p2, eta_p3, eta_o1)
    }
}

impl ConfigFields for LearningRates {
    fn assign(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
        assign_f64!(self, key, value;
            lr_mean, lr_log_scale, lr_quat, lr_opacity_logit, lr_color, lr_pose_rot, lr_pose_trans)
    }
}

/// Splits a config text into `(line_number, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config { line: n + 1, msg: format!("expected `key = value`, got {line:?}") })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config { line: n + 1, msg: "empty key or value".into() });
        }
        out.push((n + 1, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Applies every line of `text` to the first target that owns the key.
/// Unknown keys are a hard error.
pub fn apply_config(text: &str, targets: &mut [&mut dyn ConfigFields]) -> Result<()> {
    for (line, key, value) in parse_key_values(text)? {
        let mut handled = false;
        for target in targets.iter_mut() {
            if let Some(res) = target.assign(&key, &value) {
                res.map_err(|msg| Error::Config { line, msg })?;
                handled = true;
                break;
            }
        }
        if !handled {
            return Err(Error::Config { line, msg: format!("unknown key {key:?}") });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let l = LossConfig::default();
        assert_eq!((l.lambda1, l.lambda2, l.lambda3, l.lambda4), (1.0, 0.5, 1.0, 0.01));
        let m = ManagementConfig::default();
        assert_eq!((m.eta_s1, m.eta_r1, m.eta_g1, m.eta_s2, m.eta_r2), (0.2, 10.0, 0.0001, 0.1, 40.0));
        assert_eq!((m.eta_p1, m.eta_p2, m.eta_r3, m.eta_p3, m.eta_r4, m.eta_o1), (0.6, 0.2, 5.0, 1.5, 7.0, 0.05));
    }

    #[test]
    fn parses_mixed_file() {
        let text = "# tracking\nlambda2 = 0.1\n\neta_r2 = 40 # px\nnu=0.001\nlr_color = 1e-3\n";
        let mut loss = LossConfig::default();
        let mut mgmt = ManagementConfig::default();
        let mut lr = LearningRates::default();
        apply_config(text, &mut [&mut loss, &mut mgmt, &mut lr]).unwrap();
        assert_eq!(loss.lambda2, 0.1);
        assert_eq!(loss.nu, Some(0.001));
        assert_eq!(mgmt.eta_r2, 40.0);
        assert_eq!(lr.lr_color, 1e-3);
    }

    #[test]
    fn unknown_key_is_fatal() {
        let mut loss = LossConfig::default();
        let err = apply_config("lambda9 = 1", &mut [&mut loss]).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn malformed_value_reports_line() {
        let mut loss = LossConfig::default();
        let err = apply_config("\nlambda1 = abc", &mut [&mut loss]).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
    }
}
