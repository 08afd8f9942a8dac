//! Positional-gradient densification used before identity-guided
//! densification takes over: clone small Gaussians with a high mean
//! position gradient, split large ones, prune transparent ones.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backward::ParamGrads;
use crate::scene::{Gaussian, GaussianCloud, RowOrigin};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean position-gradient norm threshold, per unit scene extent.
    pub grad_threshold: f64,
    /// Gaussians no larger than this fraction of the extent are cloned
    /// rather than split.
    pub percent_dense: f64,
    pub opacity_eps: f64,
    pub split_scale_div: f64,
    /// Hard cap on the number of Gaussians grown by densification.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            opacity_eps: 0.005,
            split_scale_div: 1.6,
            max_gaussians: 20_000,
        }
    }
}

/// Per-Gaussian positional gradient statistics since the last pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn zeros(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for i in 0..self.grad_accum.len() {
            if grads.visible[i] {
                self.grad_accum[i] += grads.position[i].norm();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.grad_accum
            .iter()
            .zip(&self.count)
            .map(|(a, &c)| a / c.max(1) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub origins: Vec<RowOrigin>,
}

enum Action {
    Keep,
    Clone,
    Split,
    Prune,
}

/// One densification pass. `seed` drives the split sampling.
pub fn standard_densify(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    seed: u64,
) -> DensifyReport {
    let n = cloud.len();
    let mean = stats.mean();
    let threshold = cfg.grad_threshold * scene_extent;
    let mut actions: Vec<Action> = cloud
        .gaussians
        .iter()
        .map(|g| if g.opacity < cfg.opacity_eps { Action::Prune } else { Action::Keep })
        .collect();

    // strongest gradients first so the cap keeps the most useful growth
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| matches!(actions[i], Action::Keep) && mean[i] > threshold)
        .collect();
    candidates.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    let mut budget = cfg.max_gaussians.saturating_sub(n);
    for i in candidates {
        if budget == 0 {
            break;
        }
        budget -= 1;
        actions[i] = if cloud.gaussians[i].max_scale() <= cfg.percent_dense * scene_extent {
            Action::Clone
        } else {
            Action::Split
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut spawned = Vec::new();
    let (mut cloned, mut split, mut pruned) = (0, 0, 0);
    for (i, action) in actions.iter().enumerate() {
        let g = &cloud.gaussians[i];
        match action {
            Action::Prune => pruned += 1,
            Action::Keep => rows.push((RowOrigin::Kept(i), g.clone())),
            Action::Clone => {
                cloned += 1;
                rows.push((RowOrigin::Kept(i), g.clone()));
                spawned.push((RowOrigin::Spawned(i), g.clone()));
            }
            Action::Split => {
                split += 1;
                for child in sample_children(g, cfg.split_scale_div, &mut rng) {
                    spawned.push((RowOrigin::Spawned(i), child));
                }
            }
        }
    }
    rows.extend(spawned);
    let origins = rows.iter().map(|(o, _)| *o).collect();
    cloud.rebuild(rows);
    DensifyReport {
        cloned,
        split,
        pruned,
        origins,
    }
}

/// Two children drawn from the parent's own distribution, shrunk by `div`.
fn sample_children(g: &Gaussian, div: f64, rng: &mut ChaCha8Rng) -> [Gaussian; 2] {
    let rot = g.rotation_matrix();
    let mut child = || {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let mut c = g.clone();
        c.position = g.position + rot * g.scale.component_mul(&z);
        c.scale = g.scale / div;
        c
    };
    [child(), child()]
}
