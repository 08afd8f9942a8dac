mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gradiseg::backward::ParamGrads;
use gradiseg::densify::{standard_densify, DensifyConfig, DensifyStats};
use gradiseg::head::ClassifierHead;
use gradiseg::igd::{igd_step, mean_monitor, split_gaussian, IgdConfig, SplitDirection};
use gradiseg::optim::{adam_step, LearningRates, OptimizerState};
use gradiseg::render::render;
use gradiseg::scene::{Gaussian, GaussianCloud, RowOrigin};

fn cloud_with_monitors(seed: u64, n: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = common::random_cloud(&mut rng, n, 3, 1.0);
    for i in 0..n {
        let g = &mut cloud.gaussians[i];
        g.scale = Vector3::from_fn(|_, _| rng.gen_range(0.01..0.12));
        if rng.gen_bool(0.1) {
            g.opacity = rng.gen_range(0.0..0.005);
        }
        cloud.visible_count[i] = if rng.gen_bool(0.8) { rng.gen_range(1..20) } else { 0 };
        cloud.id_grad_accum[i] = rng.gen_range(0.0..5.0);
        cloud.pos_grad_ema[i] = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    }
    cloud
}

/// numpy-style linear percentile, written out independently.
fn reference_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (v.len() - 1) as f64 * q / 100.0;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] * (1.0 - (pos - lo as f64)) + v[hi] * (pos - lo as f64)
}

#[test]
fn pruning_removes_exactly_the_transparent_and_oversized() {
    let cfg = IgdConfig::default();
    for seed in 0..20 {
        let mut cloud = cloud_with_monitors(seed, 150);
        cloud.id_grad_accum.iter_mut().for_each(|v| *v = 0.0);
        let extent = 1.0;
        let expected: Vec<Gaussian> = cloud
            .gaussians
            .iter()
            .filter(|g| !(g.opacity < 0.005 || g.scale.max() > 0.1 * extent))
            .cloned()
            .collect();
        let report = igd_step(&mut cloud, &cfg, extent);
        assert_eq!(report.split, 0, "all monitors zero means no splits");
        assert_eq!(cloud.gaussians, expected);
        assert_eq!(report.pruned, 150 - expected.len());
    }
}

#[test]
fn single_anomaly_grows_the_cloud_by_one() {
    let mut cloud = GaussianCloud::new(2);
    for i in 0..100 {
        let mut g = Gaussian::isotropic(Vector3::new(i as f64 * 0.01, 0.0, 0.0), 0.02, 0.5, Vector3::repeat(0.5), 2);
        g.scale.x = 0.03;
        cloud.push(g, 1);
        cloud.id_grad_accum[i] = 1.0;
        cloud.visible_count[i] = 1;
    }
    cloud.id_grad_accum[42] = 50.0;
    let report = igd_step(&mut cloud, &IgdConfig::default(), 1.0);
    assert_eq!((report.split, report.pruned), (1, 0));
    assert_eq!(cloud.len(), 101);
    assert!(cloud.id_grad_accum.iter().all(|&v| v == 0.0));
    assert!(cloud.visible_count.iter().all(|&v| v == 0));
    assert_eq!(report.origins[99..], [RowOrigin::Spawned(42), RowOrigin::Spawned(42)]);
    let (a, b) = (&cloud.gaussians[99], &cloud.gaussians[100]);
    assert!((a.position.x - (0.42 + 0.015)).abs() < 1e-12);
    assert!((b.position.x - (0.42 - 0.015)).abs() < 1e-12);
}

#[test]
fn split_set_matches_reference_percentile() {
    let cfg = IgdConfig {
        tau_percentile: 90.0,
        ..IgdConfig::default()
    };
    for seed in 0..30 {
        let mut cloud = cloud_with_monitors(100 + seed, 200);
        let extent = 1.0;
        let alive: Vec<bool> = cloud.gaussians.iter().map(|g| g.opacity >= 0.005 && g.scale.max() <= 0.1).collect();
        let m: Vec<f64> = (0..200).map(|i| cloud.id_grad_accum[i] / cloud.visible_count[i].max(1) as f64).collect();
        let pool: Vec<f64> = (0..200).filter(|&i| alive[i] && cloud.visible_count[i] > 0).map(|i| m[i]).collect();
        let tau = reference_percentile(&pool, 90.0);
        let expected: Vec<usize> = (0..200).filter(|&i| alive[i] && m[i] > tau).collect();
        assert_eq!(mean_monitor(&cloud), m);
        let report = igd_step(&mut cloud, &cfg, extent);
        let spawned: Vec<usize> = report
            .origins
            .iter()
            .filter_map(|o| match o {
                RowOrigin::Spawned(i) => Some(*i),
                _ => None,
            })
            .step_by(2)
            .collect();
        assert_eq!(spawned, expected, "seed {seed}");
        assert!((report.threshold.unwrap() - tau).abs() < 1e-12);
    }
}

#[test]
fn documented_split_example() {
    let g = Gaussian {
        position: Vector3::zeros(),
        scale: Vector3::new(2.0, 1.0, 1.0),
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity: 0.7,
        color: Vector3::new(0.1, 0.2, 0.3),
        encoding: vec![0.5, -0.5],
    };
    let (a, b) = split_gaussian(&g, &Vector3::zeros(), &IgdConfig::default());
    assert_eq!(a.position, Vector3::new(1.0, 0.0, 0.0));
    assert_eq!(b.position, Vector3::new(-1.0, 0.0, 0.0));
    assert_eq!(a.scale, Vector3::new(1.25, 0.625, 0.625));
    assert_eq!((a.opacity, &a.color, &a.encoding), (g.opacity, &g.color, &g.encoding));
    assert_eq!(b.scale, a.scale);
}

#[test]
fn split_changes_the_render_only_locally() {
    let cfg = IgdConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = common::random_cloud(&mut rng, 60, 2, 1.0);
        for g in cloud.gaussians.iter_mut() {
            g.scale *= 0.5;
        }
        let cam = common::random_camera(&mut rng, 48);
        let before = render(&cloud, &cam, [0.0; 3]).unwrap();
        let i = rng.gen_range(0..cloud.len());
        let (a, b) = split_gaussian(&cloud.gaussians[i], &cloud.pos_grad_ema[i], &cfg);
        cloud.gaussians[i] = a;
        cloud.push(b, -1);
        let after = render(&cloud, &cam, [0.0; 3]).unwrap();
        let l1 = before.color.iter().zip(&after.color).map(|(x, y)| (x - y).abs()).sum::<f64>() / (48.0 * 48.0);
        worst = worst.max(l1);
    }
    assert!(worst <= 0.15, "mean per-pixel RGB change {worst}");
}

#[test]
fn optimizer_rows_follow_prune_and_split() {
    let mut cloud = cloud_with_monitors(7, 80);
    let mut head = ClassifierHead::zeros(4, 3);
    let mut state = OptimizerState::new(80, 3, 4);
    for (k, v) in state.position.m.iter_mut().enumerate() {
        *v = k as f64;
    }
    for (k, v) in state.encoding.v.iter_mut().enumerate() {
        *v = 1.0 + k as f64;
    }
    let report = igd_step(&mut cloud, &IgdConfig::default(), 1.0);
    state.remap(&report.origins);
    assert_eq!(state.rows(), cloud.len());
    assert_eq!(state.position.len(), cloud.len() * 3);
    assert_eq!(state.encoding.len(), cloud.len() * 3);
    for (row, origin) in report.origins.iter().enumerate() {
        match *origin {
            RowOrigin::Kept(i) => {
                assert_eq!(state.position.m[row * 3], (i * 3) as f64);
                assert_eq!(state.encoding.v[row * 3 + 2], 1.0 + (i * 3 + 2) as f64);
            }
            RowOrigin::Spawned(_) => {
                assert!(state.position.m[row * 3..row * 3 + 3].iter().all(|&v| v == 0.0));
                assert!(state.rotation.v[row * 4..row * 4 + 4].iter().all(|&v| v == 0.0));
            }
        }
    }
    let grads = ParamGrads::zeros(cloud.len(), 3, 4);
    adam_step(&mut cloud, &mut head, &mut state, &grads, &LearningRates::default()).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn igd_invariants(seed in any::<u64>(), n in 1usize..150, q in 1.0f64..99.0, principal in any::<bool>()) {
        let mut cloud = cloud_with_monitors(seed, n);
        let cfg = IgdConfig {
            tau_percentile: q,
            split_direction: if principal { SplitDirection::PrincipalAxis } else { SplitDirection::PositionGradient },
            ..IgdConfig::default()
        };
        let before = cloud.clone();
        let report = igd_step(&mut cloud, &cfg, 1.0);
        prop_assert_eq!(cloud.len(), n - report.pruned - report.split + 2 * report.split);
        prop_assert_eq!(report.origins.len(), cloud.len());
        prop_assert!(cloud.gaussians.iter().all(|g| g.opacity >= cfg.opacity_eps));
        prop_assert!(cloud.id_grad_accum.iter().all(|&v| v == 0.0));
        prop_assert!(cloud.visible_count.iter().all(|&v| v == 0));
        let mut row = 0;
        while row < report.origins.len() {
            if let RowOrigin::Spawned(p) = report.origins[row] {
                let (a, b) = (&cloud.gaussians[row], &cloud.gaussians[row + 1]);
                let mid = (a.position + b.position) / 2.0;
                prop_assert!((mid - before.gaussians[p].position).norm() < 1e-12);
                prop_assert_eq!(a.scale, b.scale);
                prop_assert_eq!(&a.encoding, &before.gaussians[p].encoding);
                row += 2;
            } else {
                row += 1;
            }
        }
    }
}

#[test]
fn prune_only_pass_without_gradients() {
    let mut cloud = cloud_with_monitors(3, 100);
    let transparent = cloud.gaussians.iter().filter(|g| g.opacity < 0.005).count();
    let stats = DensifyStats::zeros(100);
    let report = standard_densify(&mut cloud, &stats, &DensifyConfig::default(), 1.0, 0);
    assert_eq!((report.cloned, report.split, report.pruned), (0, 0, transparent));
    assert_eq!(cloud.len(), 100 - transparent);
}

#[test]
fn high_gradient_small_gaussian_is_cloned() {
    let mut cloud = GaussianCloud::new(1);
    for i in 0..3 {
        cloud.push(Gaussian::isotropic(Vector3::new(i as f64, 0.0, 0.0), 0.005, 0.5, Vector3::repeat(0.5), 1), 0);
    }
    let mut stats = DensifyStats::zeros(3);
    stats.grad_accum[1] = 1.0;
    stats.count[1] = 1;
    let report = standard_densify(&mut cloud, &stats, &DensifyConfig::default(), 1.0, 0);
    assert_eq!((report.cloned, report.split), (1, 0));
    assert_eq!(cloud.len(), 4);
    assert_eq!(cloud.gaussians[3], cloud.gaussians[1]);
    assert_eq!(report.origins[3], RowOrigin::Spawned(1));
}
