//! Training loop: photometric L1 plus weighted 2D cross-entropy and 3D
//! neighbour consistency, Adam updates, and the densification schedule
//! (positional densification, then identity-guided densification, with the
//! neighbour search switching to the direction-restricted variant).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backward::{accumulate_monitors, backward, ParamGrads, PixelGrads};
use crate::camera::CameraView;
use crate::config::TrainConfig;
use crate::dataset::{Bounds, Dataset, Split};
use crate::densify::{standard_densify, DensifyStats};
use crate::format::save_scene;
use crate::head::{loss_2d, ClassifierHead, HeadGrads};
use crate::igd::igd_step;
use crate::knn::{loss_3d, KdTree, KnnMode, Loss3dParams};
use crate::metrics::psnr;
use crate::optim::{adam_step, OptimizerState};
use crate::render::{render, RenderOutput};
use crate::scene::{assign_groups, Gaussian, GaussianCloud, IDENTITY_QUAT};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "iter,l1,l2d,l3d,num_gaussians,psnr_heldout";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SCENE_FILE: &str = "scene.gseg";
const INIT_NEIGHBOURS: usize = 3;
const INIT_ENCODING_STD: f64 = 0.01;

/// Mean absolute per-channel difference and its gradient.
pub fn l1_loss(rendered: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let inv = 1.0 / rendered.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let diff = r - t;
            loss += diff.abs();
            if diff > 0.0 {
                inv
            } else if diff < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    (loss * inv, grad)
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub l1: f64,
    /// `None` when the term is switched off (`alpha = 0`).
    pub l2d: Option<f64>,
    /// `None` when the term is switched off (`beta = 0` or no parameters).
    pub l3d: Option<f64>,
    pub total: f64,
    pub grads: ParamGrads,
}

/// `L1 + alpha·L_2d + beta·L_3d` for one rendered view, with gradients
/// for every Gaussian parameter and the head.
pub fn total_loss(
    cloud: &GaussianCloud,
    head: &ClassifierHead,
    view: &CameraView,
    out: &RenderOutput,
    alpha: f64,
    beta: f64,
    l3d: Option<&Loss3dParams>,
) -> Result<TotalLoss> {
    let (w, h, d) = (out.width, out.height, cloud.encoding_dim());
    let (l1, d_color) = l1_loss(&out.color, &view.image.data);
    let mut pixel_grads = PixelGrads::zeros(w, h, d);
    pixel_grads.color = d_color;
    let mut head_grads = HeadGrads::zeros(head.num_classes(), head.dim());
    let mut l2d = None;
    if alpha > 0.0 {
        let l2 = loss_2d(&out.identity, &view.mask.data, head)?;
        pixel_grads.identity = l2.d_identity.iter().map(|g| g * alpha).collect();
        head_grads.add_scaled(&l2.d_head, alpha);
        l2d = Some(l2.loss);
    }
    let mut grads = backward(cloud, &view.camera, out, &pixel_grads)?;
    grads.head = head_grads;
    let mut l3 = None;
    if let Some(params) = l3d.filter(|_| beta > 0.0) {
        let loss = loss_3d(cloud, head, params)?;
        for (g, v) in grads.encoding.iter_mut().zip(&loss.d_encoding) {
            *g += beta * v;
        }
        if let Some(dh) = &loss.d_head {
            grads.head.add_scaled(dh, beta);
        }
        l3 = Some(loss.loss);
    }
    let total = l1 + alpha * l2d.unwrap_or(0.0) + beta * l3.unwrap_or(0.0);
    Ok(TotalLoss {
        l1,
        l2d,
        l3d: l3,
        total,
        grads,
    })
}

/// Random initial cloud inside `bounds`: isotropic scale equal to the mean
/// distance to the nearest neighbours, grey, faint, tiny random encodings.
pub fn initial_cloud(bounds: &Bounds, count: usize, dim: usize, opacity: f64, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vector3<f64>> = (0..count)
        .map(|_| Vector3::from_fn(|a, _| rng.gen_range(bounds.min[a]..=bounds.max[a])))
        .collect();
    let tree = KdTree::new(&points);
    let floor = 1e-4 * bounds.extent().max(1e-9);
    let normal = Normal::new(0.0, INIT_ENCODING_STD).expect("valid std");
    let mut cloud = GaussianCloud::new(dim);
    for (i, p) in points.iter().enumerate() {
        let nbrs = tree.nearest(i, INIT_NEIGHBOURS);
        let sigma = if nbrs.is_empty() {
            bounds.extent() / 10.0
        } else {
            nbrs.iter().map(|&j| (points[j] - p).norm()).sum::<f64>() / nbrs.len() as f64
        };
        let encoding = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        cloud.push(
            Gaussian {
                position: *p,
                scale: Vector3::repeat(sigma.max(floor)),
                rotation: IDENTITY_QUAT,
                opacity,
                color: Vector3::repeat(0.5),
                encoding,
            },
            crate::scene::UNASSIGNED,
        );
    }
    cloud
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub l1: f64,
    pub l2d: Option<f64>,
    pub l3d: Option<f64>,
    pub num_gaussians: usize,
    pub psnr_heldout: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.8}"));
        format!(
            "{},{:.8},{},{},{},{:.6}",
            self.iter,
            self.l1,
            opt(self.l2d),
            opt(self.l3d),
            self.num_gaussians,
            self.psnr_heldout
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub cloud: GaussianCloud,
    pub head: ClassifierHead,
    pub metrics: Vec<MetricsRow>,
    /// Checkpoint files written, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// What the schedule does at a given iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub densify: bool,
    pub igd: bool,
    pub knn: KnnMode,
}

pub fn phase_at(cfg: &TrainConfig, iter: usize) -> Phase {
    let densify_end = cfg.densify_end();
    Phase {
        densify: iter % cfg.densify_interval == 0 && iter < densify_end,
        igd: cfg.igd
            && cfg.igd_interval > 0
            && iter % cfg.igd_interval == 0
            && iter >= densify_end
            && iter < cfg.igd_end(),
        knn: if cfg.la_knn && iter >= cfg.knn_switch() {
            KnnMode::LocalAdaptive
        } else {
            KnnMode::Global
        },
    }
}

fn checkpoint_name(iter: usize) -> String {
    format!("ckpt_{iter}.gseg")
}

/// Trains on the dataset's training views. With `out_dir`, writes
/// checkpoints, the metrics log and the final scene there.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    let train_views = dataset.split(Split::Train);
    if train_views.len() < 2 {
        return Err(Error::Invalid(format!(
            "training needs at least 2 training views, dataset has {}",
            train_views.len()
        )));
    }
    let heldout = dataset.split(Split::Test).first().copied().unwrap_or(train_views[0]);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }

    let background = dataset.manifest.background;
    let extent = dataset.extent();
    let lr = cfg.learning_rates(extent);
    let igd_cfg = cfg.igd_config();
    let densify_cfg = cfg.densify_config();
    let num_classes = dataset.manifest.num_classes;

    let mut cloud = initial_cloud(
        &dataset.manifest.bounds,
        cfg.init_points,
        cfg.encoding_dim,
        cfg.init_opacity,
        cfg.seed,
    );
    let mut head = ClassifierHead::zeros(num_classes, cfg.encoding_dim);
    let mut state = OptimizerState::new(cloud.len(), cfg.encoding_dim, num_classes);
    let mut stats = DensifyStats::zeros(cloud.len());
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();

    for iter in 1..=cfg.total_iters {
        let view = train_views[(iter - 1) % train_views.len()];
        let phase = phase_at(cfg, iter);
        let out = render(&cloud, &view.camera, background)?;
        let l3d_params = Loss3dParams {
            samples: cfg.m,
            k: cfg.k,
            mode: phase.knn,
            seed: cfg.seed.wrapping_add(iter as u64),
            head_grad: cfg.l3d_head_grad,
        };
        let loss = total_loss(&cloud, &head, view, &out, cfg.alpha, cfg.beta, Some(&l3d_params))?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { iter, loss: loss.total });
        }
        accumulate_monitors(&mut cloud, &loss.grads, cfg.monitor_mode);
        if iter < cfg.densify_end() {
            stats.accumulate(&loss.grads);
        }
        adam_step(&mut cloud, &mut head, &mut state, &loss.grads, &lr)?;

        if phase.densify {
            let seed = cfg.seed ^ (iter as u64).rotate_left(32);
            let report = standard_densify(&mut cloud, &stats, &densify_cfg, extent, seed);
            state.remap(&report.origins);
            stats = DensifyStats::zeros(cloud.len());
            cloud.reset_monitors();
            log::debug!(
                "iter {iter}: densify cloned {} split {} pruned {} -> {}",
                report.cloned,
                report.split,
                report.pruned,
                cloud.len()
            );
        }
        if phase.igd {
            let report = igd_step(&mut cloud, &igd_cfg, extent);
            state.remap(&report.origins);
            log::debug!(
                "iter {iter}: igd split {} pruned {} -> {}",
                report.split,
                report.pruned,
                cloud.len()
            );
        }

        if iter % cfg.log_interval == 0 || iter == cfg.total_iters {
            let image = render(&cloud, &heldout.camera, background)?.color_image();
            let row = MetricsRow {
                iter,
                l1: loss.l1,
                l2d: loss.l2d,
                l3d: loss.l3d,
                num_gaussians: cloud.len(),
                psnr_heldout: psnr(&image, &heldout.image)?,
            };
            log::info!("{}", row.to_csv());
            metrics.push(row);
        }
        if let Some(dir) = out_dir {
            if iter % cfg.checkpoint_interval == 0 || iter == cfg.total_iters {
                let mut snapshot = cloud.clone();
                assign_groups(&mut snapshot, &head);
                let path = dir.join(checkpoint_name(iter));
                save_scene(&snapshot, &head, &path)?;
                checkpoints.push(path);
            }
        }
    }

    if cfg.total_iters > 0 {
        assign_groups(&mut cloud, &head);
    }
    if let Some(dir) = out_dir {
        save_scene(&cloud, &head, &dir.join(SCENE_FILE))?;
        let path = dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&metrics)).map_err(|e| Error::file(&path, e))?;
    }
    Ok(TrainResult {
        cloud,
        head,
        metrics,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_value_and_gradient() {
        let (l, g) = l1_loss(&[0.5, 0.2, 0.3, 0.0], &[0.25, 0.2, 0.5, 1.0]);
        assert!((l - (0.25 + 0.0 + 0.2 + 1.0) / 4.0).abs() < 1e-15);
        assert_eq!(g, vec![0.25, 0.0, -0.25, -0.25]);
    }

    #[test]
    fn schedule_phases_are_exclusive() {
        let cfg = TrainConfig::default();
        for iter in 1..=cfg.total_iters {
            let p = phase_at(&cfg, iter);
            assert!(!(p.densify && p.igd));
            if p.densify {
                assert!(iter < 1200 && iter % 100 == 0);
            }
            if p.igd {
                assert!((1200..1500).contains(&iter));
            }
            assert_eq!(p.knn == KnnMode::LocalAdaptive, iter >= 1200);
        }
        let off = TrainConfig {
            igd: false,
            la_knn: false,
            ..TrainConfig::default()
        };
        assert!((1..=3000).all(|i| !phase_at(&off, i).igd && phase_at(&off, i).knn == KnnMode::Global));
    }

    #[test]
    fn initial_cloud_is_valid_and_seeded() {
        let b = Bounds::default();
        let a = initial_cloud(&b, 50, 4, 0.1, 3);
        a.validate().unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, initial_cloud(&b, 50, 4, 0.1, 3));
        assert_ne!(a, initial_cloud(&b, 50, 4, 0.1, 4));
        assert!(a.gaussians.iter().all(|g| (0..3).all(|k| g.position[k].abs() <= 1.0)));
    }

    #[test]
    fn csv_format() {
        let row = MetricsRow {
            iter: 100,
            l1: 0.5,
            l2d: Some(1.0),
            l3d: None,
            num_gaussians: 7,
            psnr_heldout: 20.0,
        };
        assert_eq!(metrics_csv(&[row]), format!("{METRICS_HEADER}\n100,0.50000000,1.00000000,nan,7,20.000000\n"));
    }
}
