//! Segmentation and reconstruction metrics.
//!
//! IoU scores are averaged over the non-background classes present in the
//! ground truth. The boundary variant restricts both masks to a band of
//! `band_px` pixels (Chebyshev) inside each class region's contour, with
//! the image border counting as contour.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::head::ClassifierHead;
use crate::image::{Mask, RgbImage};
use crate::render::{render, segment};
use crate::scene::GaussianCloud;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn check_sizes(a: &Mask, b: &Mask) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Invalid(format!(
            "mask sizes differ: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `max(1, round(0.02 · diagonal))`.
pub fn default_band(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// Intersection and union pixel counts per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassCounts {
    pub intersection: BTreeMap<u8, u64>,
    pub union: BTreeMap<u8, u64>,
    /// Classes present in the ground truth (background excluded).
    pub present: BTreeMap<u8, u64>,
}

impl ClassCounts {
    pub fn merge(&mut self, other: &ClassCounts) {
        for (k, v) in &other.intersection {
            *self.intersection.entry(*k).or_default() += v;
        }
        for (k, v) in &other.union {
            *self.union.entry(*k).or_default() += v;
        }
        for (k, v) in &other.present {
            *self.present.entry(*k).or_default() += v;
        }
    }

    pub fn per_class(&self) -> BTreeMap<u8, f64> {
        self.present
            .keys()
            .map(|c| {
                let i = self.intersection.get(c).copied().unwrap_or(0);
                let u = self.union.get(c).copied().unwrap_or(0);
                (*c, if u == 0 { 1.0 } else { i as f64 / u as f64 })
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        let per = self.per_class();
        if per.is_empty() {
            return 1.0;
        }
        per.values().sum::<f64>() / per.len() as f64
    }
}

fn count_region(pred: &[bool], gt: &[bool], class: u8, counts: &mut ClassCounts) {
    let mut i = 0;
    let mut u = 0;
    for (p, g) in pred.iter().zip(gt) {
        i += (*p && *g) as u64;
        u += (*p || *g) as u64;
    }
    counts.intersection.insert(class, i);
    counts.union.insert(class, u);
}

fn gt_classes(gt: &Mask) -> Vec<u8> {
    gt.ids().into_iter().filter(|&c| c != 0).collect()
}

fn binary(mask: &Mask, class: u8) -> Vec<bool> {
    mask.data.iter().map(|&v| v == class).collect()
}

pub fn iou_counts(pred: &Mask, gt: &Mask) -> Result<ClassCounts> {
    check_sizes(pred, gt)?;
    let mut counts = ClassCounts::default();
    for c in gt_classes(gt) {
        let g = binary(gt, c);
        counts.present.insert(c, g.iter().filter(|&&v| v).count() as u64);
        count_region(&binary(pred, c), &g, c, &mut counts);
    }
    Ok(counts)
}

pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(iou_counts(pred, gt)?.mean())
}

/// Pixels of `region` that have a pixel outside it (or outside the image)
/// within Chebyshev distance `band`.
pub fn boundary_band(region: &[bool], width: usize, height: usize, band: usize) -> Vec<bool> {
    // erosion by a (2·band+1)² square, separable: rows then columns
    let mut rows = vec![false; region.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x as isize - band as isize;
            let hi = x + band;
            rows[y * width + x] = lo >= 0 && hi < width && (lo as usize..=hi).all(|xx| region[y * width + xx]);
        }
    }
    let mut out = vec![false; region.len()];
    for y in 0..height {
        let lo = y as isize - band as isize;
        let hi = y + band;
        for x in 0..width {
            let eroded = lo >= 0 && hi < height && (lo as usize..=hi).all(|yy| rows[yy * width + x]);
            out[y * width + x] = region[y * width + x] && !eroded;
        }
    }
    out
}

pub fn boundary_counts(pred: &Mask, gt: &Mask, band_px: usize) -> Result<ClassCounts> {
    check_sizes(pred, gt)?;
    if band_px == 0 {
        return Err(Error::Invalid("boundary band must be at least 1 px".into()));
    }
    let (w, h) = (gt.width, gt.height);
    let mut counts = ClassCounts::default();
    for c in gt_classes(gt) {
        let g = binary(gt, c);
        counts.present.insert(c, g.iter().filter(|&&v| v).count() as u64);
        let bg = boundary_band(&g, w, h, band_px);
        let bp = boundary_band(&binary(pred, c), w, h, band_px);
        count_region(&bp, &bg, c, &mut counts);
    }
    Ok(counts)
}

pub fn mbiou(pred: &Mask, gt: &Mask, band_px: usize) -> Result<f64> {
    Ok(boundary_counts(pred, gt, band_px)?.mean())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Invalid("image sizes differ".into()));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// `10·log10(1/MSE)`, capped at 99 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub name: String,
    pub psnr: f64,
    pub miou: f64,
    pub mbiou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pooled over views.
    pub per_class_iou: BTreeMap<u8, f64>,
    pub per_class_biou: BTreeMap<u8, f64>,
    pub miou: f64,
    pub mbiou: f64,
    pub psnr_mean: f64,
    pub band_px: usize,
    pub views: Vec<ViewScore>,
    /// Ground-truth pixel count per class, pooled.
    pub pixel_counts: BTreeMap<u8, u64>,
}

/// Renders and segments every view and scores it against its image and
/// mask. Class IoUs are pooled over views before averaging.
pub fn evaluate(
    cloud: &GaussianCloud,
    head: &ClassifierHead,
    views: &[&CameraView],
    background: [f64; 3],
    band_px: Option<usize>,
) -> Result<EvalReport> {
    if views.is_empty() {
        return Err(Error::Invalid("no views to evaluate".into()));
    }
    let band = band_px.unwrap_or_else(|| default_band(views[0].camera.width(), views[0].camera.height()));
    let scored: Vec<(ViewScore, ClassCounts, ClassCounts)> = views
        .par_iter()
        .map(|v| {
            let image = render(cloud, &v.camera, background)?.color_image();
            let pred = segment(cloud, head, &v.camera)?;
            let iou = iou_counts(&pred, &v.mask)?;
            let biou = boundary_counts(&pred, &v.mask, band)?;
            let score = ViewScore {
                name: v.name.clone(),
                psnr: psnr(&image, &v.image)?,
                miou: iou.mean(),
                mbiou: biou.mean(),
            };
            Ok((score, iou, biou))
        })
        .collect::<Result<_>>()?;
    let mut iou = ClassCounts::default();
    let mut biou = ClassCounts::default();
    let mut scores = Vec::with_capacity(scored.len());
    for (s, i, b) in scored {
        iou.merge(&i);
        biou.merge(&b);
        scores.push(s);
    }
    let psnr_mean = scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len() as f64;
    Ok(EvalReport {
        per_class_iou: iou.per_class(),
        per_class_biou: biou.per_class(),
        miou: iou.mean(),
        mbiou: biou.mean(),
        psnr_mean,
        band_px: band,
        views: scores,
        pixel_counts: iou.present.clone(),
    })
}
