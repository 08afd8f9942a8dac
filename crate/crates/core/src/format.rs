//! GSEG1 scene container.
//!
//! Layout (little endian): `"GSEG1"`, `u32` version, `u32 N`, `u32 D`,
//! `u32 C`, then `f32` positions `N×3`, scales `N×3`, rotations `N×4`,
//! opacities `N`, colors `N×3`, encodings `N×D`, `i32` group ids `N`, and
//! `f32` head weights `C×D` and biases `C`.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::head::ClassifierHead;
use crate::scene::{normalized, quat_norm, Gaussian, GaussianCloud, QUAT_TOLERANCE};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"GSEG1";
pub const VERSION: u32 = 1;
/// Quaternion norm drift that is silently renormalised on load.
pub const LOAD_QUAT_TOLERANCE: f64 = 1e-4;

pub fn save_scene(cloud: &GaussianCloud, head: &ClassifierHead, path: &Path) -> Result<()> {
    let bytes = scene_to_bytes(cloud, head)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn load_scene(path: &Path) -> Result<(GaussianCloud, ClassifierHead)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    scene_from_bytes(&bytes)
}

pub fn scene_to_bytes(cloud: &GaussianCloud, head: &ClassifierHead) -> Result<Vec<u8>> {
    cloud.validate()?;
    let d = cloud.encoding_dim();
    if head.dim() != d {
        return Err(Error::Invariant(format!(
            "head dimension {} does not match encoding dimension {d}",
            head.dim()
        )));
    }
    if !head.is_finite() {
        return Err(Error::Invariant("head parameters not finite".into()));
    }
    let n = cloud.len();
    let c = head.num_classes();
    let mut out = Vec::with_capacity(21 + 4 * (n * (14 + d) + c * (d + 1)));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, d as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    let gs = &cloud.gaussians;
    gs.iter().flat_map(|g| g.position.iter().copied()).for_each(&mut put);
    gs.iter().flat_map(|g| g.scale.iter().copied()).for_each(&mut put);
    gs.iter().flat_map(|g| g.rotation).for_each(&mut put);
    gs.iter().map(|g| g.opacity).for_each(&mut put);
    gs.iter().flat_map(|g| g.color.iter().copied()).for_each(&mut put);
    gs.iter().flat_map(|g| g.encoding.iter().copied()).for_each(&mut put);
    for &gid in &cloud.group_id {
        out.extend_from_slice(&gid.to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    head.weights.iter().copied().for_each(&mut put);
    head.biases.iter().copied().for_each(&mut put);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take4(&mut self) -> Result<[u8; 4]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format(format!("truncated payload at byte {}", self.pos)))?;
        self.pos += 4;
        Ok(chunk.try_into().expect("4-byte slice"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take4().map(u32::from_le_bytes)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        (0..count).map(|_| self.take4().map(|b| f32::from_le_bytes(b) as f64)).collect()
    }
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<(GaussianCloud, ClassifierHead)> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Format("bad magic, expected GSEG1".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let c = r.u32()? as usize;
    let body = 4 * (n * (14 + d) + c * (d + 1));
    if bytes.len() - r.pos < body {
        return Err(Error::Format(format!(
            "truncated payload: {} bytes after header, {body} expected",
            bytes.len() - r.pos
        )));
    }
    let positions = r.f32s(n * 3)?;
    let scales = r.f32s(n * 3)?;
    let rotations = r.f32s(n * 4)?;
    let opacities = r.f32s(n)?;
    let colors = r.f32s(n * 3)?;
    let encodings = r.f32s(n * d)?;
    let groups = (0..n).map(|_| r.take4().map(i32::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    let weights = r.f32s(c * d)?;
    let biases = r.f32s(c)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let v3 = |v: &[f64], i: usize| Vector3::new(v[i * 3], v[i * 3 + 1], v[i * 3 + 2]);
    let mut cloud = GaussianCloud::new(d);
    for i in 0..n {
        let mut rotation = [rotations[i * 4], rotations[i * 4 + 1], rotations[i * 4 + 2], rotations[i * 4 + 3]];
        let drift = (quat_norm(&rotation) - 1.0).abs();
        if drift > LOAD_QUAT_TOLERANCE || !drift.is_finite() {
            return Err(Error::Invariant(format!(
                "gaussian {i}: rotation norm drift {drift:e} beyond tolerance"
            )));
        }
        if drift > QUAT_TOLERANCE {
            rotation = normalized(&rotation);
        }
        cloud.push(
            Gaussian {
                position: v3(&positions, i),
                scale: v3(&scales, i),
                rotation,
                opacity: opacities[i],
                color: v3(&colors, i),
                encoding: encodings[i * d..(i + 1) * d].to_vec(),
            },
            groups[i],
        );
    }
    cloud.validate()?;
    let head = ClassifierHead::from_parts(c, d, weights, biases)?;
    Ok((cloud, head))
}
