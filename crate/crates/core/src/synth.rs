//! Procedural multi-view scenes with exact ground truth.
//!
//! Each object is a shell of Gaussians sampled over a primitive's surface
//! and tagged with its group id. Images are rendered from the ground-truth
//! cloud; masks come from the per-group compositing weights, so every mask
//! is reproducible by the model class itself.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraView, Intrinsics};
use crate::dataset::{write_dataset, Bounds, GroupEntry, Manifest, Split, ViewEntry, MANIFEST_VERSION};
use crate::format::save_scene;
use crate::head::ClassifierHead;
use crate::render::{render, render_group_weights};
use crate::scene::{Gaussian, GaussianCloud, DEFAULT_ENCODING_DIM, DEFAULT_NUM_CLASSES, IDENTITY_QUAT};
use crate::{Error, Result};

pub const GT_SCENE_FILE: &str = "gt_scene.gseg";
/// A pixel belongs to a group when that group's weight exceeds this.
pub const MASK_THRESHOLD: f64 = 0.5;
pub const MAX_OBJECTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Box,
    Ellipsoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub primitive: Primitive,
    pub center: [f64; 3],
    /// Radius (sphere: first component), half extents (box) or radii
    /// (ellipsoid).
    pub size: [f64; 3],
    pub color: [f64; 3],
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub label: Option<String>,
}

fn default_samples() -> usize {
    600
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    /// Training views on the ring.
    pub views: usize,
    /// Held-out views at half-step azimuths.
    pub test_views: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub opacity: f64,
    pub num_classes: usize,
    pub encoding_dim: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            objects: Vec::new(),
            views: 16,
            test_views: 4,
            radius: 3.0,
            elevation_deg: 25.0,
            fov_deg: 40.0,
            width: 64,
            height: 64,
            seed: 42,
            background: [0.0; 3],
            opacity: 0.9,
            num_classes: DEFAULT_NUM_CLASSES,
            encoding_dim: DEFAULT_ENCODING_DIM,
        }
    }
}

impl SceneSpec {
    /// The standard three-object desk scene.
    pub fn desk() -> Self {
        let object = |primitive, center, size, color, label: &str| ObjectSpec {
            primitive,
            center,
            size,
            color,
            samples: default_samples(),
            label: Some(label.to_string()),
        };
        Self {
            objects: vec![
                object(Primitive::Sphere, [-0.45, 0.05, 0.0], [0.3; 3], [0.85, 0.2, 0.15], "sphere"),
                object(Primitive::Box, [0.4, 0.3, -0.05], [0.22, 0.22, 0.25], [0.2, 0.75, 0.25], "box"),
                object(Primitive::Ellipsoid, [0.1, -0.45, 0.0], [0.32, 0.16, 0.2], [0.2, 0.35, 0.9], "ellipsoid"),
            ],
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scene spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.objects.is_empty() {
            return bad("scene spec has no objects".into());
        }
        if self.objects.len() > MAX_OBJECTS {
            return bad(format!("at most {MAX_OBJECTS} objects are supported"));
        }
        if self.objects.len() >= self.num_classes.min(self.encoding_dim) {
            return bad("object count must stay below both num_classes and encoding_dim".into());
        }
        if self.views < 2 {
            return bad("at least 2 views are required".into());
        }
        if self.width == 0 || self.height == 0 || self.num_classes > 256 {
            return bad("invalid image size or class count".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.radius > 0.0) {
            return bad("invalid camera ring".into());
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return bad("object opacity must lie in (0, 1]".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size.iter().any(|&s| !(s > 0.0)) || o.samples == 0 {
                return bad(format!("object {i}: sizes and sample count must be positive"));
            }
            if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("object {i}: color outside [0, 1]"));
            }
            let (lo, hi) = object_box(o);
            if lo.iter().chain(&hi).any(|v| v.abs() > 1.0) {
                return bad(format!("object {i} leaves the unit working volume"));
            }
        }
        Ok(())
    }
}

fn object_box(o: &ObjectSpec) -> ([f64; 3], [f64; 3]) {
    let size = match o.primitive {
        Primitive::Sphere => [o.size[0]; 3],
        _ => o.size,
    };
    (
        [0, 1, 2].map(|a| o.center[a] - size[a]),
        [0, 1, 2].map(|a| o.center[a] + size[a]),
    )
}

/// Uniform point on the unit sphere.
fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Surface point and outward normal.
fn sample_surface(o: &ObjectSpec, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>) {
    let c = Vector3::from(o.center);
    match o.primitive {
        Primitive::Sphere => {
            let n = unit_vector(rng);
            (c + n * o.size[0], n)
        }
        Primitive::Ellipsoid => {
            let u = unit_vector(rng);
            let r = Vector3::from(o.size);
            let n = u.component_div(&r).normalize();
            (c + u.component_mul(&r), n)
        }
        Primitive::Box => {
            let h = o.size;
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = Vector3::from_fn(|a, _| rng.gen_range(-h[a]..=h[a]));
            p[axis] = sign * h[axis];
            let mut n = Vector3::zeros();
            n[axis] = sign;
            (c + p, n)
        }
    }
}

fn surface_area(o: &ObjectSpec) -> f64 {
    let [a, b, c] = o.size;
    match o.primitive {
        Primitive::Sphere => 4.0 * std::f64::consts::PI * a * a,
        Primitive::Box => 8.0 * (a * b + b * c + a * c),
        // Knud Thomsen's approximation
        Primitive::Ellipsoid => {
            let p = 1.6075;
            let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
            4.0 * std::f64::consts::PI * m.powf(1.0 / p)
        }
    }
}

/// Ground-truth classifier: class `g` reads encoding dimension `g`, and the
/// background class wins unless some group's weight exceeds the mask
/// threshold.
pub fn gt_head(num_classes: usize, dim: usize, groups: usize) -> ClassifierHead {
    let mut head = ClassifierHead::zeros(num_classes, dim);
    for g in 1..=groups {
        head.weights[g * dim + g] = 1.0;
    }
    head.biases[0] = MASK_THRESHOLD;
    head
}

/// Ground-truth cloud: object `k` becomes group `k + 1`.
pub fn gt_cloud(spec: &SceneSpec) -> Result<GaussianCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let light = Vector3::new(0.3, -0.5, 0.8).normalize();
    let d = spec.encoding_dim;
    let mut cloud = GaussianCloud::new(d);
    for (k, o) in spec.objects.iter().enumerate() {
        let group = k + 1;
        let spacing = (surface_area(o) / o.samples as f64).sqrt();
        let mut encoding = vec![0.0; d];
        encoding[group] = 1.0;
        for _ in 0..o.samples {
            let (p, n) = sample_surface(o, &mut rng);
            let shade = 0.65 + 0.35 * n.dot(&light).max(0.0);
            let color = Vector3::from(o.color) * shade;
            cloud.push(
                Gaussian {
                    position: p,
                    scale: Vector3::repeat(0.6 * spacing),
                    rotation: IDENTITY_QUAT,
                    opacity: spec.opacity,
                    color: color.map(|c| c.clamp(0.0, 1.0)),
                    encoding: encoding.clone(),
                },
                group as i32,
            );
        }
    }
    Ok(cloud)
}

/// Padded bounding box of all objects.
pub fn scene_bounds(spec: &SceneSpec) -> Bounds {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for o in &spec.objects {
        let (lo, hi) = object_box(o);
        for a in 0..3 {
            min[a] = min[a].min(lo[a]);
            max[a] = max[a].max(hi[a]);
        }
    }
    let pad = 0.1 * (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
    Bounds {
        min: min.map(|v| v - pad),
        max: max.map(|v| v + pad),
    }
}

/// Cameras on the ring: training views first, then held-out views at
/// half-step azimuths spread around the ring.
pub fn ring_cameras(spec: &SceneSpec) -> Result<Vec<(String, Split, Camera)>> {
    let n: usize = spec.objects.len();
    let target = spec
        .objects
        .iter()
        .fold(Vector3::zeros(), |acc, o| acc + Vector3::from(o.center))
        / n as f64;
    let intrinsics = Intrinsics::from_fov(spec.width, spec.height, spec.fov_deg);
    let elev = spec.elevation_deg.to_radians();
    let at = |azimuth: f64| {
        let eye = target
            + Vector3::new(azimuth.cos() * elev.cos(), azimuth.sin() * elev.cos(), elev.sin()) * spec.radius;
        Camera::look_at(eye, target, Vector3::z(), intrinsics)
    };
    let step = std::f64::consts::TAU / spec.views as f64;
    let mut cams = Vec::new();
    for k in 0..spec.views {
        cams.push((format!("train_{k:03}"), Split::Train, at(k as f64 * step)?));
    }
    for t in 0..spec.test_views {
        let k = t * spec.views / spec.test_views.max(1);
        cams.push((format!("test_{t:03}"), Split::Test, at((k as f64 + 0.5) * step)?));
    }
    Ok(cams)
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub cloud: GaussianCloud,
    pub head: ClassifierHead,
    pub manifest: Manifest,
    pub views: Vec<CameraView>,
}

pub fn generate(spec: &SceneSpec) -> Result<Generated> {
    let cloud = gt_cloud(spec)?;
    let groups = spec.objects.len();
    let head = gt_head(spec.num_classes, spec.encoding_dim, groups);
    let cams = ring_cameras(spec)?;
    let views = cams
        .par_iter()
        .map(|(name, _, cam)| {
            Ok(CameraView {
                name: name.clone(),
                camera: cam.clone(),
                image: render(&cloud, cam, spec.background)?.color_image(),
                mask: render_group_weights(&cloud, cam)?.to_mask(MASK_THRESHOLD)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        num_classes: spec.num_classes,
        bounds: scene_bounds(spec),
        background: spec.background,
        groups: spec
            .objects
            .iter()
            .enumerate()
            .map(|(k, o)| GroupEntry {
                id: k as u32 + 1,
                label: o.label.clone().unwrap_or_else(|| format!("object_{}", k + 1)),
                color: o.color,
            })
            .collect(),
        views: cams
            .iter()
            .map(|(name, split, cam)| ViewEntry::from_camera(name, *split, cam))
            .collect(),
    };
    Ok(Generated {
        cloud,
        head,
        manifest,
        views,
    })
}

/// Writes the dataset and the ground-truth scene into `dir`.
pub fn write_generated(dir: &Path, generated: &Generated) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    write_dataset(dir, &generated.manifest, &generated.views)?;
    save_scene(&generated.cloud, &generated.head, &dir.join(GT_SCENE_FILE))
}
