//! Flat `key = value` training configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::densify::DensifyConfig;
use crate::igd::{IgdConfig, SplitDirection};
use crate::optim::LearningRates;
use crate::scene::{MonitorMode, DEFAULT_ENCODING_DIM};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// Defaults to 40 % of `total_iters`.
    pub densify_end: Option<usize>,
    /// Defaults to 50 % of `total_iters`.
    pub igd_end: Option<usize>,
    /// Defaults to 40 % of `total_iters`.
    pub knn_switch: Option<usize>,
    pub densify_interval: usize,
    pub igd_interval: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub m: usize,
    pub seed: u64,

    /// Multiplied by the scene extent.
    pub lr_position: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_encoding: f64,
    pub lr_head: f64,

    pub init_points: usize,
    pub init_opacity: f64,
    pub encoding_dim: usize,

    /// Identity-guided densification in `[densify_end, igd_end)`.
    pub igd: bool,
    /// Direction-restricted neighbours from `knn_switch` on.
    pub la_knn: bool,
    pub l3d_head_grad: bool,
    pub monitor_mode: MonitorMode,
    pub tau_percentile: f64,
    pub opacity_eps: f64,
    pub too_large_frac: f64,
    pub split_scale_div: f64,
    pub split_offset_frac: f64,
    pub split_direction: SplitDirection,

    pub densify_grad_threshold: f64,
    pub percent_dense: f64,
    pub max_gaussians: usize,

    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lr = LearningRates::default();
        let igd = IgdConfig::default();
        let densify = DensifyConfig::default();
        Self {
            total_iters: 3000,
            densify_end: None,
            igd_end: None,
            knn_switch: None,
            densify_interval: 100,
            igd_interval: igd.interval,
            alpha: 1.0,
            beta: 2.0,
            k: 5,
            m: 1000,
            seed: 42,
            lr_position: lr.position,
            lr_scale: lr.scale,
            lr_rotation: lr.rotation,
            lr_opacity: lr.opacity,
            lr_color: lr.color,
            // the generic 2.5e-3 / 5e-4 leave the cross-entropy near ln C for
            // most of a 3000-iteration run
            lr_encoding: 0.1,
            lr_head: 0.05,
            init_points: 2000,
            init_opacity: 0.1,
            encoding_dim: DEFAULT_ENCODING_DIM,
            igd: true,
            la_knn: true,
            l3d_head_grad: false,
            monitor_mode: MonitorMode::NormSum,
            tau_percentile: igd.tau_percentile,
            opacity_eps: igd.opacity_eps,
            too_large_frac: igd.too_large_frac,
            split_scale_div: igd.split_scale_div,
            split_offset_frac: igd.split_offset_frac,
            split_direction: igd.split_direction,
            densify_grad_threshold: densify.grad_threshold,
            percent_dense: densify.percent_dense,
            max_gaussians: 10_000,
            checkpoint_interval: 500,
            log_interval: 100,
        }
    }
}

fn fraction(total: usize, f: f64) -> usize {
    (total as f64 * f).round() as usize
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn densify_end(&self) -> usize {
        self.densify_end.unwrap_or_else(|| fraction(self.total_iters, 0.4))
    }

    pub fn igd_end(&self) -> usize {
        self.igd_end.unwrap_or_else(|| fraction(self.total_iters, 0.5))
    }

    pub fn knn_switch(&self) -> usize {
        self.knn_switch.unwrap_or_else(|| fraction(self.total_iters, 0.4))
    }

    /// Copy with every defaulted phase boundary made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            densify_end: Some(self.densify_end()),
            igd_end: Some(self.igd_end()),
            knn_switch: Some(self.knn_switch()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        let (t, de, ie, ks) = (self.total_iters, self.densify_end(), self.igd_end(), self.knn_switch());
        if t > 0 && !(de <= ie && ie <= t) {
            return bad("phase boundaries must satisfy densify_end <= igd_end <= total_iters");
        }
        if t > 0 && de == 0 && self.densify_end.is_some() {
            return bad("densify_end must be positive");
        }
        if ks > t {
            return bad("knn_switch must not exceed total_iters");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights alpha and beta must be non-negative");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.densify_interval == 0 || self.checkpoint_interval == 0 || self.log_interval == 0 {
            return bad("intervals must be positive");
        }
        if self.encoding_dim == 0 {
            return bad("encoding_dim must be positive");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)");
        }
        let lrs = [
            self.lr_position,
            self.lr_scale,
            self.lr_rotation,
            self.lr_opacity,
            self.lr_color,
            self.lr_encoding,
            self.lr_head,
        ];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        self.igd_config().validate()
    }

    pub fn igd_config(&self) -> IgdConfig {
        IgdConfig {
            tau_percentile: self.tau_percentile,
            opacity_eps: self.opacity_eps,
            too_large_frac: self.too_large_frac,
            split_scale_div: self.split_scale_div,
            split_offset_frac: self.split_offset_frac,
            interval: self.igd_interval,
            split_direction: self.split_direction,
        }
    }

    pub fn densify_config(&self) -> DensifyConfig {
        DensifyConfig {
            grad_threshold: self.densify_grad_threshold,
            percent_dense: self.percent_dense,
            opacity_eps: self.opacity_eps,
            split_scale_div: self.split_scale_div,
            max_gaussians: self.max_gaussians,
        }
    }

    pub fn learning_rates(&self, scene_extent: f64) -> LearningRates {
        LearningRates {
            position: self.lr_position * scene_extent,
            scale: self.lr_scale,
            rotation: self.lr_rotation,
            opacity: self.lr_opacity,
            color: self.lr_color,
            encoding: self.lr_encoding,
            head: self.lr_head,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_proportions() {
        let c = TrainConfig::default();
        assert_eq!((c.densify_end(), c.igd_end(), c.knn_switch()), (1200, 1500, 1200));
        c.validate().unwrap();
    }

    #[test]
    fn flat_toml_round_trip() {
        let c = TrainConfig::from_toml_str("total_iters = 200\nbeta = 0.5\nsplit_direction = \"position-gradient\"\n").unwrap();
        assert_eq!((c.total_iters, c.beta, c.densify_end()), (200, 0.5, 80));
        assert_eq!(c.split_direction, SplitDirection::PositionGradient);
        let back = TrainConfig::from_toml_str(&c.resolved().to_toml_string()).unwrap();
        assert_eq!(back, c.resolved());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml_str("nonsense = 1").is_err());
        let c = TrainConfig::from_toml_str("densify_end = 2000\nigd_end = 1500").unwrap();
        assert!(c.validate().is_err());
        let c = TrainConfig::from_toml_str("beta = -1.0").unwrap();
        assert!(c.validate().is_err());
        let c = TrainConfig::from_toml_str("tau_percentile = 100.0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_iterations_is_valid() {
        let c = TrainConfig::from_toml_str("total_iters = 0").unwrap();
        c.validate().unwrap();
    }
}
