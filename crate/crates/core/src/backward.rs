//! Reverse pass of [`crate::render::render`]: exact gradients of an upstream
//! per-pixel signal with respect to every Gaussian parameter, and the
//! identity / position gradient monitors fed by them.
//!
//! Gradients are reported in the optimizer's parameterisation: log-scale,
//! opacity logit, and the raw quaternion (the rotation is built from the
//! normalised quaternion, so its gradient is tangent to the unit sphere).

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{Camera, Splat2D};
use crate::head::HeadGrads;
use crate::render::{pixel_center, project_all, RenderOutput, ALPHA_MAX, TILE_SIZE};
use crate::scene::{normalized, quat_norm, quat_to_matrix, Gaussian, GaussianCloud, MonitorMode};
use crate::{Error, Result};

/// Upstream gradients `∂L/∂C` (3 per pixel) and `∂L/∂E_id` (D per pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrads {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub color: Vec<f64>,
    pub identity: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            color: vec![0.0; width * height * 3],
            identity: vec![0.0; width * height * dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// `N × D`.
    pub encoding: Vec<f64>,
    pub head: HeadGrads,
    /// Gaussians that produced at least one fragment.
    pub visible: Vec<bool>,
}

impl ParamGrads {
    pub fn zeros(num_gaussians: usize, dim: usize, num_classes: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); num_gaussians],
            log_scale: vec![Vector3::zeros(); num_gaussians],
            rotation: vec![[0.0; 4]; num_gaussians],
            opacity_logit: vec![0.0; num_gaussians],
            color: vec![Vector3::zeros(); num_gaussians],
            encoding: vec![0.0; num_gaussians * dim],
            head: HeadGrads::zeros(num_classes, dim),
            visible: vec![false; num_gaussians],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// `self += scale · other`; visibility is OR-ed.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        fn axpy3(a: &mut [Vector3<f64>], b: &[Vector3<f64>], s: f64) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y * s);
        }
        axpy3(&mut self.position, &other.position, scale);
        axpy3(&mut self.log_scale, &other.log_scale, scale);
        axpy3(&mut self.color, &other.color, scale);
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            for k in 0..4 {
                a[k] += scale * b[k];
            }
        }
        for (a, b) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *a += scale * b;
        }
        for (a, b) in self.encoding.iter_mut().zip(&other.encoding) {
            *a += scale * b;
        }
        self.head.add_scaled(&other.head, scale);
        for (a, b) in self.visible.iter_mut().zip(&other.visible) {
            *a |= *b;
        }
    }

    /// Name of the first parameter family holding a non-finite entry.
    pub fn non_finite_family(&self) -> Option<&'static str> {
        let v3 = |v: &[Vector3<f64>]| v.iter().all(|x| x.iter().all(|e| e.is_finite()));
        let flat = |v: &[f64]| v.iter().all(|e| e.is_finite());
        if !v3(&self.position) {
            Some("position")
        } else if !v3(&self.log_scale) {
            Some("scale")
        } else if !self.rotation.iter().all(|q| q.iter().all(|e| e.is_finite())) {
            Some("rotation")
        } else if !flat(&self.opacity_logit) {
            Some("opacity")
        } else if !v3(&self.color) {
            Some("color")
        } else if !flat(&self.encoding) {
            Some("encoding")
        } else if !flat(&self.head.weights) || !flat(&self.head.biases) {
            Some("head")
        } else {
            None
        }
    }
}

/// Gradient with respect to one splat's screen-space quantities.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad {
    mean: [f64; 2],
    /// `∂L/∂m` weighted outer products of the pixel offset: `xx, xy, yy`,
    /// where `m = dᵀ Q d` and `Q` is the conic.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct TileGrads {
    gaussians: Vec<u32>,
    splat: Vec<SplatGrad>,
    encoding: Vec<f64>,
}

/// Back-propagates `pixel_grads` through the render `out` of `cloud` seen
/// from `cam`.
pub fn backward(cloud: &GaussianCloud, cam: &Camera, out: &RenderOutput, pixel_grads: &PixelGrads) -> Result<ParamGrads> {
    let (width, height) = (cam.width(), cam.height());
    let n = cloud.len();
    let dim = cloud.encoding_dim();
    if (out.width, out.height) != (width, height) || out.encoding_dim != dim {
        return Err(Error::Invalid("render output does not match camera / cloud".into()));
    }
    if (pixel_grads.width, pixel_grads.height, pixel_grads.dim) != (width, height, dim)
        || pixel_grads.color.len() != width * height * 3
        || pixel_grads.identity.len() != width * height * dim
    {
        return Err(Error::Invalid("pixel gradient shape does not match render output".into()));
    }
    let splats = project_all(cloud, cam);
    if let Some(f) = out
        .fragments
        .iter()
        .find(|f| f.source_index as usize >= n || splats[f.source_index as usize].is_none())
    {
        return Err(Error::Invalid(format!(
            "fragment references gaussian {} that is not visible in this view",
            f.source_index
        )));
    }

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let bg = out.background;

    let tiles: Vec<TileGrads> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut slot_of = std::collections::HashMap::<u32, usize>::new();
            let mut tile = TileGrads {
                gaussians: Vec::new(),
                splat: Vec::new(),
                encoding: Vec::new(),
            };
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                    let p = y * width + x;
                    let frags = out.pixel_fragments(p);
                    if frags.is_empty() {
                        continue;
                    }
                    let g_color = &pixel_grads.color[p * 3..p * 3 + 3];
                    let g_id = &pixel_grads.identity[p * dim..(p + 1) * dim];
                    let px = pixel_center(x, y);
                    // g · (contribution of everything behind fragment k)
                    let mut behind = out.final_transmittance[p] * (g_color[0] * bg[0] + g_color[1] * bg[1] + g_color[2] * bg[2]);
                    for f in frags.iter().rev() {
                        let gi = f.source_index as usize;
                        let g = &cloud.gaussians[gi];
                        let slot = *slot_of.entry(f.source_index).or_insert_with(|| {
                            tile.gaussians.push(f.source_index);
                            tile.splat.push(SplatGrad::default());
                            tile.encoding.extend(std::iter::repeat(0.0).take(dim));
                            tile.gaussians.len() - 1
                        });
                        let w = f.weight();
                        let mut gf = 0.0;
                        for c in 0..3 {
                            gf += g_color[c] * g.color[c];
                        }
                        for (a, b) in g_id.iter().zip(&g.encoding) {
                            gf += a * b;
                        }
                        let d_alpha = f.transmittance_before * gf - behind / (1.0 - f.alpha);
                        behind += w * gf;

                        let sg = &mut tile.splat[slot];
                        for c in 0..3 {
                            sg.color[c] += w * g_color[c];
                        }
                        for (acc, gv) in tile.encoding[slot * dim..(slot + 1) * dim].iter_mut().zip(g_id) {
                            *acc += w * gv;
                        }

                        let splat = splats[gi].as_ref().expect("checked above");
                        let d = px - splat.mean;
                        let falloff = (-0.5 * splat.mahalanobis_sq(&px)).exp();
                        let raw = g.opacity * falloff;
                        if raw > ALPHA_MAX {
                            continue;
                        }
                        let d_m = -0.5 * raw * d_alpha;
                        let qd = splat.conic * d;
                        sg.mean[0] += d_alpha * raw * qd.x;
                        sg.mean[1] += d_alpha * raw * qd.y;
                        sg.conic[0] += d_m * d.x * d.x;
                        sg.conic[1] += d_m * d.x * d.y;
                        sg.conic[2] += d_m * d.y * d.y;
                        sg.opacity += d_alpha * falloff;
                    }
                }
            }
            tile
        })
        .collect();

    // fixed tile order keeps the reduction independent of scheduling
    let mut splat_grads = vec![SplatGrad::default(); n];
    let mut grads = ParamGrads::zeros(n, dim, 0);
    for tile in &tiles {
        for (slot, &gi) in tile.gaussians.iter().enumerate() {
            let gi = gi as usize;
            splat_grads[gi].add(&tile.splat[slot]);
            grads.visible[gi] = true;
            for (acc, v) in grads.encoding[gi * dim..(gi + 1) * dim]
                .iter_mut()
                .zip(&tile.encoding[slot * dim..(slot + 1) * dim])
            {
                *acc += v;
            }
        }
    }

    let chained: Vec<Option<GaussianGrad>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !grads.visible[i] {
                return None;
            }
            let splat = splats[i].as_ref().expect("visible gaussians are projected");
            Some(chain_gaussian(&cloud.gaussians[i], cam, splat, &splat_grads[i]))
        })
        .collect();
    for (i, c) in chained.into_iter().enumerate() {
        if let Some(c) = c {
            grads.position[i] = c.position;
            grads.log_scale[i] = c.log_scale;
            grads.rotation[i] = c.rotation;
            grads.opacity_logit[i] = c.opacity_logit;
            grads.color[i] = Vector3::from(splat_grads[i].color);
        }
    }
    Ok(grads)
}

struct GaussianGrad {
    position: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: [f64; 4],
    opacity_logit: f64,
}

/// Chains screen-space gradients back to the Gaussian's 3D parameters.
fn chain_gaussian(g: &Gaussian, cam: &Camera, splat: &Splat2D, sg: &SplatGrad) -> GaussianGrad {
    let view = cam.rotation;
    let t = cam.to_camera(&g.position);
    let jac = cam.projection_jacobian(&t);
    let jw = jac * view;

    let q_hat = normalized(&g.rotation);
    let rot = quat_to_matrix(&q_hat);
    let m = rot * Matrix3::from_diagonal(&g.scale);
    let sigma3 = m * m.transpose();

    // conic -> screen covariance: dL/dΣ = −Q G_Q Q
    let g_conic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let g_cov2 = -(splat.conic * g_conic * splat.conic);

    // Σ₂ = T Σ₃ Tᵀ + dilation, T = J·W
    let g_t = 2.0 * g_cov2 * jw * sigma3;
    let g_sigma3 = jw.transpose() * g_cov2 * jw;
    let g_jac = g_t * view.transpose();

    // mean = proj(t): dmean/dt is J itself
    let g_mean = Vector2::new(sg.mean[0], sg.mean[1]);
    let mut g_cam = jac.transpose() * g_mean;
    if cam.projection == crate::camera::Projection::Pinhole {
        let k = &cam.intrinsics;
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        g_cam.x += g_jac[(0, 2)] * (-k.fx * iz2);
        g_cam.y += g_jac[(1, 2)] * (-k.fy * iz2);
        g_cam.z += g_jac[(0, 0)] * (-k.fx * iz2)
            + g_jac[(0, 2)] * (2.0 * k.fx * t.x * iz3)
            + g_jac[(1, 1)] * (-k.fy * iz2)
            + g_jac[(1, 2)] * (2.0 * k.fy * t.y * iz3);
    }
    let position = view.transpose() * g_cam;

    // Σ₃ = M Mᵀ, M = R·diag(s)
    let g_m = 2.0 * g_sigma3 * m;
    let mut log_scale = Vector3::zeros();
    let mut g_rot = Matrix3::zeros();
    for j in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            ds += g_m[(r, j)] * rot[(r, j)];
            g_rot[(r, j)] = g_m[(r, j)] * g.scale[j];
        }
        log_scale[j] = ds * g.scale[j];
    }
    let rotation = quat_grad(&g.rotation, &q_hat, &g_rot);

    let o = g.opacity;
    GaussianGrad {
        position,
        log_scale,
        rotation,
        opacity_logit: sg.opacity * o * (1.0 - o),
    }
}

/// Gradient with respect to the raw quaternion `q` given `∂L/∂R` at
/// `R(q/|q|)`.
fn quat_grad(q: &[f64; 4], q_hat: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q_hat;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gh = [gw, gx, gy, gz];
    // d(q/|q|)/dq = (I − q̂ q̂ᵀ) / |q|
    let dot: f64 = (0..4).map(|k| gh[k] * q_hat[k]).sum();
    let inv = 1.0 / quat_norm(q);
    [
        (gh[0] - dot * q_hat[0]) * inv,
        (gh[1] - dot * q_hat[1]) * inv,
        (gh[2] - dot * q_hat[2]) * inv,
        (gh[3] - dot * q_hat[3]) * inv,
    ]
}

pub const EMA_DECAY: f64 = 0.9;

/// Updates the identity-gradient monitor, visibility counts and the
/// position-gradient EMA from this iteration's gradients.
pub fn accumulate_monitors(cloud: &mut GaussianCloud, grads: &ParamGrads, mode: MonitorMode) {
    let d = cloud.encoding_dim();
    for i in 0..cloud.len() {
        let ge = &grads.encoding[i * d..(i + 1) * d];
        match mode {
            MonitorMode::NormSum => {
                cloud.id_grad_accum[i] += ge.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            MonitorMode::VectorSum => {
                let acc = &mut cloud.id_grad_vec[i * d..(i + 1) * d];
                for (a, v) in acc.iter_mut().zip(ge) {
                    *a += v;
                }
                cloud.id_grad_accum[i] = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        if grads.visible[i] {
            cloud.visible_count[i] += 1;
        }
        cloud.pos_grad_ema[i] = cloud.pos_grad_ema[i] * EMA_DECAY + grads.position[i] * (1.0 - EMA_DECAY);
    }
}
