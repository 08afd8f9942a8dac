//! Shared helpers for the integration tests: random scenes, a naive
//! compositing reference, and a central finite-difference harness.
#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gradiseg::backward::ParamGrads;
use gradiseg::camera::{Camera, CameraView, Intrinsics, Projection};
use gradiseg::head::ClassifierHead;
use gradiseg::image::{Mask, RgbImage};
use gradiseg::knn::{neighbor_lists, sample_targets, KnnMode, Loss3dParams};
use gradiseg::optim::{logit, sigmoid};
use gradiseg::scene::{Gaussian, GaussianCloud};

pub fn unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
    q.map(|v| v / n)
}

/// Gaussian near the origin, inside the view of [`test_camera`].
pub fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize, spread: f64) -> Gaussian {
    Gaussian {
        position: Vector3::from_fn(|_, _| rng.gen_range(-spread..spread)),
        scale: Vector3::from_fn(|_, _| rng.gen_range(0.05..0.4)),
        rotation: unit_quat(rng),
        opacity: rng.gen_range(0.1..0.95),
        color: Vector3::from_fn(|_, _| rng.gen_range(0.05..0.95)),
        encoding: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> GaussianCloud {
    let gaussians = (0..n).map(|_| random_gaussian(rng, dim, spread)).collect();
    GaussianCloud::from_gaussians(dim, gaussians)
}

pub fn random_head(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> ClassifierHead {
    let weights = (0..classes * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let biases = (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ClassifierHead::from_parts(classes, dim, weights, biases).unwrap()
}

/// Pinhole camera on the −z axis looking at the origin.
pub fn test_camera(size: usize, distance: f64) -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.0, -distance),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        Intrinsics::from_fov(size, size, 50.0),
    )
    .unwrap()
}

/// Slightly rotated camera, orthographic or pinhole.
pub fn random_camera(rng: &mut ChaCha8Rng, size: usize) -> Camera {
    let yaw: f64 = rng.gen_range(-0.4..0.4);
    let pitch: f64 = rng.gen_range(-0.3..0.3);
    let distance = rng.gen_range(2.5..4.0);
    let eye = Vector3::new(distance * yaw.sin() * pitch.cos(), distance * pitch.sin(), -distance * yaw.cos() * pitch.cos());
    let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), Intrinsics::from_fov(size, size, 50.0)).unwrap();
    if rng.gen_bool(0.25) {
        let s = size as f64 / 3.0;
        Camera::new(
            cam.rotation,
            cam.translation,
            Intrinsics {
                fx: s,
                fy: s,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                width: size,
                height: size,
            },
            Projection::Orthographic,
        )
        .unwrap()
    } else {
        cam
    }
}

pub struct NaiveRender {
    pub color: Vec<f64>,
    pub identity: Vec<f64>,
    pub final_t: Vec<f64>,
    /// Per pixel: (source index, α) front to back.
    pub fragments: Vec<Vec<(usize, f64)>>,
}

struct NaiveSplat {
    index: usize,
    depth: f64,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
}

fn rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

fn naive_splat(g: &Gaussian, index: usize, cam: &Camera) -> Option<NaiveSplat> {
    let t = cam.rotation * g.position + cam.translation;
    if t.z <= 0.01 {
        return None;
    }
    let k = &cam.intrinsics;
    let (mean, jac) = match cam.projection {
        Projection::Pinhole => (
            Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy),
            nalgebra::Matrix2x3::new(k.fx / t.z, 0.0, -k.fx * t.x / (t.z * t.z), 0.0, k.fy / t.z, -k.fy * t.y / (t.z * t.z)),
        ),
        Projection::Orthographic => (
            Vector2::new(k.fx * t.x + k.cx, k.fy * t.y + k.cy),
            nalgebra::Matrix2x3::new(k.fx, 0.0, 0.0, 0.0, k.fy, 0.0),
        ),
    };
    let r = rotation(&g.rotation);
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let sigma = r * s2 * r.transpose();
    let m = jac * cam.rotation;
    let cov = m * sigma * m.transpose() + Matrix2::identity() * 0.3;
    let (rx, ry) = ((9.0 * cov[(0, 0)]).sqrt(), (9.0 * cov[(1, 1)]).sqrt());
    let (w, h) = (k.width as f64, k.height as f64);
    if mean.x + rx < 0.0 || mean.x - rx > w || mean.y + ry < 0.0 || mean.y - ry > h {
        return None;
    }
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    Some(NaiveSplat {
        index,
        depth: t.z,
        mean,
        conic,
    })
}

/// Per-pixel compositing over the full depth-sorted list, no tiles.
pub fn naive_render(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> NaiveRender {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let d = cloud.encoding_dim();
    let mut splats: Vec<NaiveSplat> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| naive_splat(g, i, cam))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    let mut out = NaiveRender {
        color: vec![0.0; w * h * 3],
        identity: vec![0.0; w * h * d],
        final_t: vec![1.0; w * h],
        fragments: vec![Vec::new(); w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            for s in &splats {
                let g = &cloud.gaussians[s.index];
                let dv = px - s.mean;
                let power = (dv.transpose() * s.conic * dv)[(0, 0)];
                let alpha = (g.opacity * (-0.5 * power).exp()).min(0.99);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                for c in 0..3 {
                    out.color[p * 3 + c] += g.color[c] * alpha * t;
                }
                for k in 0..d {
                    out.identity[p * d + k] += g.encoding[k] * alpha * t;
                }
                out.fragments[p].push((s.index, alpha));
                t *= 1.0 - alpha;
            }
            for c in 0..3 {
                out.color[p * 3 + c] += t * background[c];
            }
            out.final_t[p] = t;
        }
    }
    out
}

/// Which parameter of which Gaussian (or of the head) to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Param {
    Position(usize, usize),
    LogScale(usize, usize),
    Rotation(usize, usize),
    OpacityLogit(usize),
    Color(usize, usize),
    Encoding(usize, usize),
    HeadWeight(usize),
    HeadBias(usize),
}

impl Param {
    pub fn family(&self) -> &'static str {
        match self {
            Param::Position(..) => "position",
            Param::LogScale(..) => "scale",
            Param::Rotation(..) => "rotation",
            Param::OpacityLogit(..) => "opacity",
            Param::Color(..) => "color",
            Param::Encoding(..) => "encoding",
            Param::HeadWeight(..) | Param::HeadBias(..) => "head",
        }
    }

    pub fn perturb(&self, cloud: &mut GaussianCloud, head: &mut ClassifierHead, h: f64) {
        match *self {
            Param::Position(i, a) => cloud.gaussians[i].position[a] += h,
            Param::LogScale(i, a) => cloud.gaussians[i].scale[a] *= h.exp(),
            Param::Rotation(i, k) => cloud.gaussians[i].rotation[k] += h,
            Param::OpacityLogit(i) => {
                let o = cloud.gaussians[i].opacity;
                cloud.gaussians[i].opacity = sigmoid(logit(o) + h);
            }
            Param::Color(i, a) => cloud.gaussians[i].color[a] += h,
            Param::Encoding(i, k) => cloud.gaussians[i].encoding[k] += h,
            Param::HeadWeight(k) => head.weights[k] += h,
            Param::HeadBias(k) => head.biases[k] += h,
        }
    }

    pub fn analytic(&self, grads: &ParamGrads, d: usize) -> f64 {
        match *self {
            Param::Position(i, a) => grads.position[i][a],
            Param::LogScale(i, a) => grads.log_scale[i][a],
            Param::Rotation(i, k) => grads.rotation[i][k],
            Param::OpacityLogit(i) => grads.opacity_logit[i],
            Param::Color(i, a) => grads.color[i][a],
            Param::Encoding(i, k) => grads.encoding[i * d + k],
            Param::HeadWeight(k) => grads.head.weights[k],
            Param::HeadBias(k) => grads.head.biases[k],
        }
    }
}

/// Every parameter of the given families.
pub fn all_params(cloud: &GaussianCloud, head: &ClassifierHead, families: &[&str]) -> Vec<Param> {
    let d = cloud.encoding_dim();
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        for a in 0..3 {
            out.push(Param::Position(i, a));
            out.push(Param::LogScale(i, a));
            out.push(Param::Color(i, a));
        }
        for k in 0..4 {
            out.push(Param::Rotation(i, k));
        }
        out.push(Param::OpacityLogit(i));
        for k in 0..d {
            out.push(Param::Encoding(i, k));
        }
    }
    out.extend((0..head.weights.len()).map(Param::HeadWeight));
    out.extend((0..head.biases.len()).map(Param::HeadBias));
    out.retain(|p| families.contains(&p.family()));
    out
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_TOL || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Default)]
pub struct FdOutcome {
    pub checked: usize,
    /// Parameters skipped because the perturbation changed the discrete
    /// structure (fragment set, α clamp, neighbour lists).
    pub skipped: usize,
    pub failures: Vec<String>,
}

/// Central differences of `objective` against the analytic gradients.
/// `structure` fingerprints the discrete state; a parameter whose ±h
/// evaluations see different structure is skipped.
pub fn fd_check<F, S>(
    cloud: &GaussianCloud,
    head: &ClassifierHead,
    grads: &ParamGrads,
    params: &[Param],
    objective: F,
    structure: S,
) -> FdOutcome
where
    F: Fn(&GaussianCloud, &ClassifierHead) -> f64,
    S: Fn(&GaussianCloud, &ClassifierHead) -> Vec<u64>,
{
    let d = cloud.encoding_dim();
    let base = structure(cloud, head);
    let mut out = FdOutcome::default();
    for p in params {
        let eval = |h: f64| {
            let (mut c, mut hd) = (cloud.clone(), head.clone());
            p.perturb(&mut c, &mut hd, h);
            (objective(&c, &hd), structure(&c, &hd))
        };
        let (fp, sp) = eval(FD_STEP);
        let (fm, sm) = eval(-FD_STEP);
        if sp != base || sm != base {
            out.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let analytic = p.analytic(grads, d);
        out.checked += 1;
        if !close(analytic, numeric) {
            out.failures.push(format!("{p:?}: analytic {analytic:.9e} numeric {numeric:.9e}"));
        }
    }
    out
}

/// Fragment sources and α-clamp flags of every pixel, flattened.
pub fn render_structure(cloud: &GaussianCloud, cam: &Camera) -> Vec<u64> {
    let out = gradiseg::render::render(cloud, cam, [0.0; 3]).unwrap();
    let mut sig = Vec::with_capacity(out.fragments.len() + out.offsets.len());
    sig.extend(out.offsets.iter().map(|&o| o as u64));
    sig.extend(
        out.fragments
            .iter()
            .map(|f| ((f.source_index as u64) << 1) | (f.alpha >= gradiseg::render::ALPHA_MAX) as u64),
    );
    sig
}

pub const FD_SIZE: usize = 8;
pub const FD_DIM: usize = 3;
pub const FD_CLASSES: usize = 5;

/// One small random problem for the finite-difference checks.
pub struct FdConfig {
    pub cloud: GaussianCloud,
    pub head: ClassifierHead,
    pub view: CameraView,
    pub background: [f64; 3],
    pub l3d: Loss3dParams,
}

pub fn fd_config(seed: u64) -> FdConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=10);
    let mut cloud = random_cloud(&mut rng, n, FD_DIM, 0.8);
    for ema in cloud.pos_grad_ema.iter_mut() {
        *ema = nalgebra::Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    }
    let head = random_head(&mut rng, FD_CLASSES, FD_DIM);
    let camera = random_camera(&mut rng, FD_SIZE);
    let image = RgbImage {
        width: FD_SIZE,
        height: FD_SIZE,
        data: (0..FD_SIZE * FD_SIZE * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let mask = Mask {
        width: FD_SIZE,
        height: FD_SIZE,
        data: (0..FD_SIZE * FD_SIZE).map(|_| rng.gen_range(0..FD_CLASSES as u8)).collect(),
    };
    let background = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let l3d = Loss3dParams {
        samples: rng.gen_range(1..=n),
        k: rng.gen_range(1..=3),
        mode: if rng.gen_bool(0.5) { KnnMode::Global } else { KnnMode::LocalAdaptive },
        seed,
        head_grad: true,
    };
    FdConfig {
        cloud,
        head,
        view: CameraView {
            name: format!("cfg{seed}"),
            camera,
            image,
            mask,
        },
        background,
        l3d,
    }
}

/// Render structure plus the neighbour lists of the sampled targets.
pub fn fd_structure(cfg: &FdConfig) -> impl Fn(&GaussianCloud, &ClassifierHead) -> Vec<u64> + '_ {
    move |c, _| {
        let mut sig = render_structure(c, &cfg.view.camera);
        let targets = sample_targets(c.len(), cfg.l3d.samples, cfg.l3d.seed);
        for list in neighbor_lists(c, &targets, cfg.l3d.k, cfg.l3d.mode) {
            sig.push(u64::MAX);
            sig.extend(list.iter().map(|&j| j as u64));
        }
        sig
    }
}

/// Exhaustive K nearest by squared distance, ties by index.
pub fn brute_nearest(points: &[Vector3<f64>], i: usize, k: usize) -> Vec<usize> {
    let q = points[i];
    let mut all: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| {
            let p = points[j];
            let (dx, dy, dz) = (p.x - q.x, p.y - q.y, p.z - q.z);
            (dx * dx + dy * dy + dz * dz, j)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|x| x.1).collect()
}

/// Exhaustive K smallest positive projections onto `u`, ties by index.
pub fn brute_forward(points: &[Vector3<f64>], i: usize, u: &Vector3<f64>, k: usize) -> Vec<usize> {
    let q = points[i];
    let mut all: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| {
            let p = points[j];
            ((p.x - q.x) * u.x + (p.y - q.y) * u.y + (p.z - q.z) * u.z, j)
        })
        .filter(|x| x.0 > 0.0)
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|x| x.1).collect()
}
