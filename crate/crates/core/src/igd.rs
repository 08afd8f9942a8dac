//! Identity-gradient guided densification: prune, find Gaussians whose mean
//! identity-gradient monitor is anomalously high, split each into two
//! children on either side of it, then reset the monitors.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::scene::{Gaussian, GaussianCloud, RowOrigin};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitDirection {
    #[default]
    PrincipalAxis,
    PositionGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IgdConfig {
    pub tau_percentile: f64,
    pub opacity_eps: f64,
    /// Fraction of the scene extent above which a Gaussian is too large.
    pub too_large_frac: f64,
    pub split_scale_div: f64,
    pub split_offset_frac: f64,
    pub interval: usize,
    pub split_direction: SplitDirection,
}

impl Default for IgdConfig {
    fn default() -> Self {
        Self {
            tau_percentile: 99.0,
            opacity_eps: 0.005,
            too_large_frac: 0.1,
            split_scale_div: 1.6,
            split_offset_frac: 0.5,
            interval: 100,
            split_direction: SplitDirection::PrincipalAxis,
        }
    }
}

impl IgdConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.tau_percentile,
            self.opacity_eps,
            self.too_large_frac,
            self.split_scale_div,
            self.split_offset_frac,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.interval == 0 {
            return Err(Error::Config("igd parameters must be positive".into()));
        }
        if self.tau_percentile >= 100.0 {
            return Err(Error::Config("tau_percentile must be below 100".into()));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile of `values` (`q` in `[0, 100]`), the
/// same convention as numpy's default.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = rank - lo as f64;
    Some(v[lo] + frac * (v[hi] - v[lo]))
}

/// Index of the largest scale component; the lowest axis wins ties.
pub fn major_axis(scale: &Vector3<f64>) -> usize {
    let mut best = 0;
    for a in 1..3 {
        if scale[a] > scale[best] {
            best = a;
        }
    }
    best
}

/// Splits `g` into two children offset by `±offset·s_max·v`. `ema` is the
/// parent's position-gradient EMA, used in position-gradient mode.
pub fn split_gaussian(g: &Gaussian, ema: &Vector3<f64>, cfg: &IgdConfig) -> (Gaussian, Gaussian) {
    let s_max = g.max_scale();
    if s_max < 1e-9 {
        return (g.clone(), g.clone());
    }
    let principal = || g.rotation_matrix().column(major_axis(&g.scale)).into_owned();
    let v = match cfg.split_direction {
        SplitDirection::PrincipalAxis => principal(),
        SplitDirection::PositionGradient => {
            let norm = ema.norm();
            if norm < 1e-12 {
                principal()
            } else {
                -ema / norm
            }
        }
    };
    let offset = v * (cfg.split_offset_frac * s_max);
    let mut a = g.clone();
    a.position = g.position + offset;
    a.scale = g.scale / cfg.split_scale_div;
    let mut b = a.clone();
    b.position = g.position - offset;
    (a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgdReport {
    pub pruned: usize,
    pub split: usize,
    /// Threshold `τ` on the mean monitor, if any Gaussian was visible.
    pub threshold: Option<f64>,
    /// Origin of every row of the updated cloud.
    pub origins: Vec<RowOrigin>,
}

/// Per-Gaussian mean monitor `accum / max(1, visible)`.
pub fn mean_monitor(cloud: &GaussianCloud) -> Vec<f64> {
    cloud
        .id_grad_accum
        .iter()
        .zip(&cloud.visible_count)
        .map(|(a, &v)| a / v.max(1) as f64)
        .collect()
}

/// One IGD pass. Survivors keep their order; children of split Gaussians
/// are appended in parent order. All monitors are reset afterwards.
pub fn igd_step(cloud: &mut GaussianCloud, cfg: &IgdConfig, scene_extent: f64) -> IgdReport {
    let n = cloud.len();
    let too_large = cfg.too_large_frac * scene_extent;
    let prune: Vec<bool> = cloud
        .gaussians
        .iter()
        .map(|g| g.opacity < cfg.opacity_eps || g.max_scale() > too_large)
        .collect();
    let monitor = mean_monitor(cloud);
    let visible: Vec<f64> = (0..n)
        .filter(|&i| !prune[i] && cloud.visible_count[i] > 0)
        .map(|i| monitor[i])
        .collect();
    let threshold = percentile(&visible, cfg.tau_percentile);

    let mut rows = Vec::with_capacity(n);
    let mut children = Vec::new();
    let mut pruned = 0;
    for i in 0..n {
        if prune[i] {
            pruned += 1;
            continue;
        }
        if threshold.is_some_and(|t| monitor[i] > t) {
            let (a, b) = split_gaussian(&cloud.gaussians[i], &cloud.pos_grad_ema[i], cfg);
            children.push((RowOrigin::Spawned(i), a));
            children.push((RowOrigin::Spawned(i), b));
        } else {
            rows.push((RowOrigin::Kept(i), cloud.gaussians[i].clone()));
        }
    }
    let split = children.len() / 2;
    rows.extend(children);
    let origins = rows.iter().map(|(o, _)| *o).collect();
    cloud.rebuild(rows);
    cloud.reset_monitors();
    IgdReport {
        pruned,
        split,
        threshold,
        origins,
    }
}
