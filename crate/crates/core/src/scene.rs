//! Gaussian scene representation, per-Gaussian training monitors and
//! group-level editing.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::head::ClassifierHead;
use crate::{Error, Result};

pub const DEFAULT_ENCODING_DIM: usize = 16;
pub const DEFAULT_NUM_CLASSES: usize = 256;

/// Group id of a Gaussian that has not been classified yet.
pub const UNASSIGNED: i32 = -1;

/// Background class id in masks and group tables.
pub const BACKGROUND: u32 = 0;

pub const QUAT_TOLERANCE: f64 = 1e-6;

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vector3<f64>,
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: Quat,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub encoding: Vec<f64>,
}

impl Gaussian {
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>, dim: usize) -> Self {
        Self {
            position,
            scale: Vector3::repeat(sigma),
            rotation: IDENTITY_QUAT,
            opacity,
            color,
            encoding: vec![0.0; dim],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalized(&self.rotation))
    }

    /// World-space covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    pub fn max_scale(&self) -> f64 {
        self.scale.max()
    }

    /// Checks the type invariants; `index` only decorates the message.
    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Invariant(format!("gaussian {index}: {what}")));
        if !self.position.iter().all(|v| v.is_finite()) {
            return bad("position not finite");
        }
        if !self.scale.iter().all(|&s| s.is_finite() && s > 0.0) {
            return bad("scale must be finite and strictly positive");
        }
        let norm = quat_norm(&self.rotation);
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_TOLERANCE {
            return bad("rotation is not a unit quaternion");
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return bad("opacity out of range");
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return bad("color out of range");
        }
        if !self.encoding.iter().all(|v| v.is_finite()) {
            return bad("identity encoding not finite");
        }
        Ok(())
    }
}

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalized(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Where a row of a rebuilt cloud came from. Used to keep every
/// per-Gaussian array (monitors, optimizer moments, densification stats)
/// in sync across prune / split / clone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrigin {
    /// Survivor of the previous row with this index; state carries over.
    Kept(usize),
    /// New row derived from this parent; per-row state starts at zero.
    Spawned(usize),
}

impl RowOrigin {
    pub fn source(self) -> usize {
        match self {
            RowOrigin::Kept(i) | RowOrigin::Spawned(i) => i,
        }
    }
}

/// Re-indexes a flat per-row array of `width` values per row.
pub fn remap_rows(data: &[f64], width: usize, origins: &[RowOrigin]) -> Vec<f64> {
    let mut out = Vec::with_capacity(origins.len() * width);
    for origin in origins {
        match *origin {
            RowOrigin::Kept(i) => out.extend_from_slice(&data[i * width..(i + 1) * width]),
            RowOrigin::Spawned(_) => out.extend(std::iter::repeat(0.0).take(width)),
        }
    }
    out
}

/// Monitor accumulation rule for identity-encoding gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitorMode {
    /// Sum of per-iteration gradient norms.
    #[default]
    NormSum,
    /// Norm of the summed gradient vectors.
    VectorSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    /// Accumulated identity-gradient monitor (always ≥ 0).
    pub id_grad_accum: Vec<f64>,
    /// Running vector sum of identity gradients, `N × D`; only used in
    /// [`MonitorMode::VectorSum`].
    pub id_grad_vec: Vec<f64>,
    pub pos_grad_ema: Vec<Vector3<f64>>,
    pub visible_count: Vec<u32>,
    pub group_id: Vec<i32>,
    encoding_dim: usize,
}

impl GaussianCloud {
    pub fn new(encoding_dim: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            id_grad_accum: Vec::new(),
            id_grad_vec: Vec::new(),
            pos_grad_ema: Vec::new(),
            visible_count: Vec::new(),
            group_id: Vec::new(),
            encoding_dim,
        }
    }

    pub fn from_gaussians(encoding_dim: usize, gaussians: Vec<Gaussian>) -> Self {
        let mut cloud = Self::new(encoding_dim);
        for g in gaussians {
            cloud.push(g, UNASSIGNED);
        }
        cloud
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoding_dim
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, gaussian: Gaussian, group: i32) {
        assert_eq!(gaussian.encoding.len(), self.encoding_dim, "encoding dimension mismatch");
        self.gaussians.push(gaussian);
        self.id_grad_accum.push(0.0);
        self.id_grad_vec.extend(std::iter::repeat(0.0).take(self.encoding_dim));
        self.pos_grad_ema.push(Vector3::zeros());
        self.visible_count.push(0);
        self.group_id.push(group);
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    /// Validates every Gaussian and the length synchronisation of the
    /// accumulators.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.id_grad_accum.len() != n
            || self.pos_grad_ema.len() != n
            || self.visible_count.len() != n
            || self.group_id.len() != n
            || self.id_grad_vec.len() != n * self.encoding_dim
        {
            return Err(Error::Invariant("accumulator arrays out of sync with gaussians".into()));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.encoding.len() != self.encoding_dim {
                return Err(Error::Invariant(format!("gaussian {i}: encoding dimension mismatch")));
            }
            g.validate(i)?;
        }
        if let Some(i) = self.id_grad_accum.iter().position(|&a| !(a >= 0.0)) {
            return Err(Error::Invariant(format!("gaussian {i}: negative identity monitor")));
        }
        if let Some(i) = self.group_id.iter().position(|&g| g < UNASSIGNED) {
            return Err(Error::Invariant(format!("gaussian {i}: invalid group id")));
        }
        Ok(())
    }

    /// Rebuilds the cloud from `(origin, gaussian)` rows. Kept rows carry
    /// their accumulators over; spawned rows start from zeroed monitors and
    /// inherit the parent's group id and position-gradient EMA.
    pub fn rebuild(&mut self, rows: Vec<(RowOrigin, Gaussian)>) {
        let d = self.encoding_dim;
        let mut next = GaussianCloud::new(d);
        for (origin, g) in rows {
            let src = origin.source();
            next.push(g, self.group_id[src]);
            let last = next.len() - 1;
            next.pos_grad_ema[last] = self.pos_grad_ema[src];
            if let RowOrigin::Kept(i) = origin {
                next.id_grad_accum[last] = self.id_grad_accum[i];
                next.visible_count[last] = self.visible_count[i];
                next.id_grad_vec[last * d..(last + 1) * d]
                    .copy_from_slice(&self.id_grad_vec[i * d..(i + 1) * d]);
            }
        }
        *self = next;
    }

    /// Keeps only rows for which `keep` is true. Returns the row origins.
    pub fn retain_rows(&mut self, mut keep: impl FnMut(usize) -> bool) -> Vec<RowOrigin> {
        let rows: Vec<(RowOrigin, Gaussian)> = self
            .gaussians
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(i, g)| (RowOrigin::Kept(i), g.clone()))
            .collect();
        let origins = rows.iter().map(|(o, _)| *o).collect();
        self.rebuild(rows);
        origins
    }

    pub fn reset_monitors(&mut self) {
        self.id_grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.id_grad_vec.iter_mut().for_each(|v| *v = 0.0);
        self.visible_count.iter_mut().for_each(|v| *v = 0);
    }

    fn has_group(&self, gid: i32) -> bool {
        self.group_id.contains(&gid)
    }
}

/// Display metadata for instance groups.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupInfo {
    pub label: String,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupTable {
    pub num_classes: usize,
    pub groups: BTreeMap<u32, GroupInfo>,
}

impl GroupTable {
    pub fn new(num_classes: usize) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(
            BACKGROUND,
            GroupInfo {
                label: "background".into(),
                color: [0.0; 3],
            },
        );
        Self { num_classes, groups }
    }

    pub fn insert(&mut self, id: u32, info: GroupInfo) -> Result<()> {
        if id == BACKGROUND {
            return Err(Error::Invalid("group id 0 is reserved for background".into()));
        }
        if id as usize >= self.num_classes {
            return Err(Error::Invalid(format!("group id {id} exceeds class count {}", self.num_classes)));
        }
        self.groups.insert(id, info);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&GroupInfo> {
        self.groups.get(&id)
    }
}

/// Sets every Gaussian's group to the argmax of the head logits on its
/// encoding (lowest class index wins ties).
pub fn assign_groups(cloud: &mut GaussianCloud, head: &ClassifierHead) {
    assign_groups_with_confidence(cloud, head, None);
}

/// Like [`assign_groups`], but Gaussians whose top class probability is
/// below `min_confidence` are left [`UNASSIGNED`].
pub fn assign_groups_with_confidence(cloud: &mut GaussianCloud, head: &ClassifierHead, min_confidence: Option<f64>) {
    let mut logits = vec![0.0; head.num_classes()];
    for (g, gid) in cloud.gaussians.iter().zip(cloud.group_id.iter_mut()) {
        head.logits_into(&g.encoding, &mut logits);
        let best = argmax(&logits);
        *gid = match min_confidence {
            Some(threshold) => {
                let probs = crate::head::softmax(&logits);
                if probs[best] >= threshold {
                    best as i32
                } else {
                    UNASSIGNED
                }
            }
            None => best as i32,
        };
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cloud without the Gaussians of group `gid`. An absent group is a no-op.
pub fn remove_group(cloud: &GaussianCloud, gid: i32) -> GaussianCloud {
    if !cloud.has_group(gid) {
        log::warn!("group {gid} not present; nothing removed");
        return cloud.clone();
    }
    let mut out = cloud.clone();
    out.retain_rows(|i| cloud.group_id[i] != gid);
    out
}

/// Cloud containing only the Gaussians of group `gid`.
pub fn extract_group(cloud: &GaussianCloud, gid: i32) -> GaussianCloud {
    if !cloud.has_group(gid) {
        log::warn!("group {gid} not present; extraction is empty");
    }
    let mut out = cloud.clone();
    out.retain_rows(|i| cloud.group_id[i] == gid);
    out
}

/// Sets the color of every member of `gid`.
pub fn recolor_group(cloud: &GaussianCloud, gid: i32, rgb: [f64; 3]) -> Result<GaussianCloud> {
    if !rgb.iter().all(|c| (0.0..=1.0).contains(c)) {
        return Err(Error::Invalid(format!("recolor value {rgb:?} outside [0, 1]")));
    }
    if !cloud.has_group(gid) {
        log::warn!("group {gid} not present; nothing recolored");
    }
    let mut out = cloud.clone();
    for (g, &id) in out.gaussians.iter_mut().zip(&cloud.group_id) {
        if id == gid {
            g.color = Vector3::from(rgb);
        }
    }
    Ok(out)
}
