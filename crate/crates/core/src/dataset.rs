//! Multi-view dataset on disk: a JSON manifest plus one PPM image and one
//! PGM instance mask per view.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraView, Intrinsics, Projection};
use crate::image::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::scene::{GroupInfo, GroupTable};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Bounds {
    /// Half the box diagonal.
    pub fn extent(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).powi(2)).sum::<f64>().sqrt() / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub id: u32,
    pub label: String,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub mode: Projection,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4.
    pub world_to_camera: [f64; 16],
    pub image: String,
    pub mask: String,
}

impl ViewEntry {
    pub fn from_camera(name: &str, split: Split, camera: &Camera) -> Self {
        let k = &camera.intrinsics;
        Self {
            name: name.to_string(),
            split,
            mode: camera.projection,
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            world_to_camera: camera.to_row_major(),
            image: format!("images/{name}.ppm"),
            mask: format!("masks/{name}.pgm"),
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let intrinsics = Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        Camera::from_row_major(&self.world_to_camera, intrinsics, self.mode)
            .map_err(|e| Error::Invalid(format!("view {}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default)]
    pub groups: Vec<GroupEntry>,
    pub views: Vec<ViewEntry>,
}

impl Manifest {
    pub fn group_table(&self) -> Result<GroupTable> {
        let mut table = GroupTable::new(self.num_classes);
        for g in &self.groups {
            table.insert(
                g.id,
                GroupInfo {
                    label: g.label.clone(),
                    color: g.color,
                },
            )?;
        }
        Ok(table)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// All views in manifest order.
    pub views: Vec<CameraView>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&CameraView> {
        self.manifest
            .views
            .iter()
            .zip(&self.views)
            .filter(|(e, _)| e.split == split)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn view(&self, index: usize) -> Result<&CameraView> {
        self.views
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("view {index} out of range (dataset has {})", self.views.len())))
    }

    pub fn extent(&self) -> f64 {
        self.manifest.bounds.extent()
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Invalid(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.num_classes == 0 || manifest.num_classes > 256 {
        return Err(Error::Invalid("num_classes must be in 1..=256".into()));
    }
    Ok(manifest)
}

/// Loads the manifest in `dir` and every image and mask it references.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let views = manifest
        .views
        .iter()
        .map(|entry| {
            let view = CameraView {
                name: entry.name.clone(),
                camera: entry.camera()?,
                image: read_ppm(&dir.join(&entry.image))?,
                mask: read_pgm(&dir.join(&entry.mask))?,
            };
            view.validate(manifest.num_classes)?;
            Ok(view)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        views,
    })
}

/// Writes `manifest.json` and the images and masks of `views`, which must
/// be in manifest order.
pub fn write_dataset(dir: &Path, manifest: &Manifest, views: &[CameraView]) -> Result<()> {
    if views.len() != manifest.views.len() {
        return Err(Error::Invalid("manifest and view list differ in length".into()));
    }
    for (entry, view) in manifest.views.iter().zip(views) {
        for rel in [&entry.image, &entry.mask] {
            if let Some(parent) = dir.join(rel).parent() {
                fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
            }
        }
        write_ppm(&dir.join(&entry.image), &view.image)?;
        write_pgm(&dir.join(&entry.mask), &view.mask)?;
    }
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))
}
