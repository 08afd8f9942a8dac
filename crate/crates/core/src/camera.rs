//! Camera models and EWA projection of 3D Gaussians to screen space.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::image::{Mask, RgbImage};
use crate::scene::Gaussian;
use crate::{Error, Result};

/// Screen-space covariance floor added to both diagonal entries (px²).
pub const COV_DILATION: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.01;

const ORTHONORMAL_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Pinhole,
    Orthographic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Pinhole intrinsics with the principal point at the image centre and
    /// the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = width as f64 / 2.0 / (fov_x_deg.to_radians() / 2.0).tan();
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Rigid world-to-camera transform plus intrinsics. Camera space is
/// x right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub projection: Projection,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        intrinsics: Intrinsics,
        projection: Projection,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            intrinsics,
            projection,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, intrinsics: Intrinsics) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::Invalid("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation, intrinsics, Projection::Pinhole)
    }

    /// Builds a camera from a row-major 4×4 world-to-camera matrix.
    pub fn from_row_major(m: &[f64; 16], intrinsics: Intrinsics, projection: Projection) -> Result<Self> {
        let mat = Matrix4::from_row_slice(m);
        let rotation: Matrix3<f64> = mat.fixed_view::<3, 3>(0, 0).into();
        let translation: Vector3<f64> = mat.fixed_view::<3, 1>(0, 3).into();
        if mat.row(3).iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::Invalid("world_to_camera bottom row must be [0, 0, 0, 1]".into()));
        }
        Self::new(rotation, translation, intrinsics, projection)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out[15] = 1.0;
        out
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if k.width == 0 || k.height == 0 {
            return Err(Error::Invalid("image size must be at least 1×1".into()));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOLERANCE) {
            return Err(Error::Invalid(format!("camera rotation not orthonormal (error {err:.2e})")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("camera translation not finite".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// World position of the camera centre.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Screen position of a camera-space point.
    pub fn project_point(&self, t: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        match self.projection {
            Projection::Pinhole => Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy),
            Projection::Orthographic => Vector2::new(k.fx * t.x + k.cx, k.fy * t.y + k.cy),
        }
    }

    /// Jacobian of [`Camera::project_point`] at camera-space `t`.
    pub fn projection_jacobian(&self, t: &Vector3<f64>) -> Matrix2x3<f64> {
        let k = &self.intrinsics;
        match self.projection {
            Projection::Pinhole => {
                let iz = 1.0 / t.z;
                Matrix2x3::new(
                    k.fx * iz,
                    0.0,
                    -k.fx * t.x * iz * iz,
                    0.0,
                    k.fy * iz,
                    -k.fy * t.y * iz * iz,
                )
            }
            Projection::Orthographic => Matrix2x3::new(k.fx, 0.0, 0.0, 0.0, k.fy, 0.0),
        }
    }
}

/// A camera paired with its target image and instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub camera: Camera,
    pub image: RgbImage,
    pub mask: Mask,
}

impl CameraView {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width(), self.camera.height());
        if (self.image.width, self.image.height) != (w, h) || (self.mask.width, self.mask.height) != (w, h) {
            return Err(Error::Invalid(format!("view {}: image/mask size differs from camera", self.name)));
        }
        if let Some(&bad) = self.mask.data.iter().find(|&&m| m as usize >= num_classes) {
            return Err(Error::Invalid(format!(
                "view {}: mask id {bad} exceeds class count {num_classes}",
                self.name
            )));
        }
        Ok(())
    }
}

/// A Gaussian projected to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// Dilated screen-space covariance (px²).
    pub cov: Matrix2<f64>,
    /// Inverse of `cov`.
    pub conic: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    pub source_index: usize,
}

impl Splat2D {
    /// Builds a splat, rejecting covariances that are not symmetric
    /// positive-definite.
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>, depth: f64, source_index: usize) -> Result<Self> {
        if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-9 {
            return Err(Error::Invalid("screen covariance not symmetric".into()));
        }
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if !(cov[(0, 0)] > 0.0 && det > 0.0) {
            return Err(Error::Invalid("screen covariance is singular".into()));
        }
        let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        Ok(Self {
            mean,
            cov,
            conic,
            depth,
            source_index,
        })
    }

    /// Squared Mahalanobis distance of `pixel` from the splat centre.
    pub fn mahalanobis_sq(&self, pixel: &Vector2<f64>) -> f64 {
        let d = pixel - self.mean;
        let q = &self.conic;
        q[(0, 0)] * d.x * d.x + (q[(0, 1)] + q[(1, 0)]) * d.x * d.y + q[(1, 1)] * d.y * d.y
    }

    /// Half extents of the axis-aligned box bounding `{d : dᵀ Σ⁻¹ d ≤ m}`.
    pub fn half_extent(&self, m: f64) -> (f64, f64) {
        ((m * self.cov[(0, 0)]).sqrt(), (m * self.cov[(1, 1)]).sqrt())
    }
}

/// EWA projection of `g` into `cam`. Returns `None` when the Gaussian lies
/// in front of the near plane or its 3σ ellipse misses the image.
pub fn project_gaussian(g: &Gaussian, cam: &Camera, source_index: usize) -> Option<Splat2D> {
    let t = cam.to_camera(&g.position);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let mean = cam.project_point(&t);
    let jw = cam.projection_jacobian(&t) * cam.rotation;
    let cov = jw * g.covariance() * jw.transpose() + Matrix2::identity() * COV_DILATION;
    // symmetrise away rounding so the splat invariant holds exactly
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let cov = Matrix2::new(cov[(0, 0)], off, off, cov[(1, 1)]);
    let splat = Splat2D::new(mean, cov, t.z, source_index).ok()?;
    let (rx, ry) = splat.half_extent(9.0);
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    if mean.x + rx < 0.0 || mean.x - rx > w || mean.y + ry < 0.0 || mean.y - ry > h {
        return None;
    }
    Some(splat)
}

/// Orders splats front to back: ascending depth, ties by ascending source
/// index. Returns positions into `splats`.
pub fn depth_sort(splats: &[Splat2D]) -> Result<Vec<usize>> {
    if splats.iter().any(|s| s.depth.is_nan()) {
        return Err(Error::Invalid("NaN splat depth".into()));
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| compare_depth(&splats[a], &splats[b]));
    Ok(order)
}

fn compare_depth(a: &Splat2D, b: &Splat2D) -> Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then_with(|| a.source_index.cmp(&b.source_index))
}
