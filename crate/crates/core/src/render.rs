//! Tiled front-to-back α-compositing of color and identity encodings.
//!
//! Every pixel composites the depth-ordered splats whose α reaches the
//! contribution cutoff. Tiles only restrict the candidate list; a splat is
//! binned into every tile its cutoff ellipse can reach, so the per-pixel
//! result is identical to compositing the full sorted splat list.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::camera::{depth_sort, project_gaussian, Camera, Splat2D};
use crate::image::{Mask, RgbImage};
use crate::scene::GaussianCloud;
use crate::{Error, Result};

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TILE_SIZE: usize = 16;

/// One splat's contribution to one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub source_index: u32,
    pub alpha: f64,
    /// `∏_{j<k} (1 − α_j)` over the earlier fragments of the pixel.
    pub transmittance_before: f64,
}

impl Fragment {
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance_before
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub encoding_dim: usize,
    pub background: [f64; 3],
    /// `H × W × 3`, row-major.
    pub color: Vec<f64>,
    /// `H × W × D`, row-major.
    pub identity: Vec<f64>,
    pub final_transmittance: Vec<f64>,
    /// Pixel `i` owns `fragments[offsets[i]..offsets[i + 1]]`, front to back.
    pub offsets: Vec<usize>,
    pub fragments: Vec<Fragment>,
}

impl RenderOutput {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel_fragments(&self, pixel: usize) -> &[Fragment] {
        &self.fragments[self.offsets[pixel]..self.offsets[pixel + 1]]
    }

    pub fn color_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.color.clone(),
        }
    }

    /// Which Gaussians produced at least one fragment.
    pub fn visible(&self, num_gaussians: usize) -> Vec<bool> {
        let mut seen = vec![false; num_gaussians];
        for f in &self.fragments {
            seen[f.source_index as usize] = true;
        }
        seen
    }
}

/// Centre of pixel `(x, y)` in screen coordinates.
pub fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// `min(0.99, o · exp(−½ dᵀ Σ⁻¹ d))`. Callers drop values below [`ALPHA_MIN`].
pub fn pixel_alpha(splat: &Splat2D, opacity: f64, pixel: &Vector2<f64>) -> f64 {
    (opacity * (-0.5 * splat.mahalanobis_sq(pixel)).exp()).min(ALPHA_MAX)
}

/// Projects every Gaussian; culled entries are `None`.
pub fn project_all(cloud: &GaussianCloud, cam: &Camera) -> Vec<Option<Splat2D>> {
    cloud
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, cam, i))
        .collect()
}

/// Non-culled splats in compositing order.
pub fn sorted_splats(cloud: &GaussianCloud, cam: &Camera) -> Result<Vec<Splat2D>> {
    let splats: Vec<Splat2D> = project_all(cloud, cam).into_iter().flatten().collect();
    let order = depth_sort(&splats)?;
    Ok(order.into_iter().map(|i| splats[i]).collect())
}

/// A splat's entry in a tile bin with its conservative pixel box and
/// the Mahalanobis bound beyond which α < 1/255.
#[derive(Clone, Copy)]
struct BinEntry {
    k: u32,
    x: (i32, i32),
    y: (i32, i32),
    m_max: f64,
}

struct TileOutput {
    color: Vec<f64>,
    identity: Vec<f64>,
    final_t: Vec<f64>,
    counts: Vec<usize>,
    fragments: Vec<Fragment>,
}

/// Renders color (with `background` behind) and the identity feature map
/// (no background term) for `cam`.
pub fn render(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    let (width, height) = (cam.width(), cam.height());
    let dim = cloud.encoding_dim();
    let splats = sorted_splats(cloud, cam)?;

    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<BinEntry>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let opacity = cloud.gaussians[s.source_index].opacity;
        if opacity < ALPHA_MIN {
            continue;
        }
        // α ≥ 1/255 requires dᵀ Σ⁻¹ d ≤ 2 ln(255 o); pad the box by a pixel.
        let m_max = 2.0 * (255.0 * opacity).ln();
        let (rx, ry) = s.half_extent(m_max);
        let x_lo = s.mean.x - rx - 1.5;
        let x_hi = s.mean.x + rx + 0.5;
        let y_lo = s.mean.y - ry - 1.5;
        let y_hi = s.mean.y + ry + 0.5;
        if x_hi < 0.0 || y_hi < 0.0 || x_lo > width as f64 || y_lo > height as f64 {
            continue;
        }
        let entry = BinEntry {
            k: k as u32,
            x: (x_lo.floor().max(-1.0) as i32, x_hi.ceil().min(width as f64) as i32),
            y: (y_lo.floor().max(-1.0) as i32, y_hi.ceil().min(height as f64) as i32),
            m_max: m_max + 1e-9 * (1.0 + m_max),
        };
        let tile = |v: f64, n: usize| ((v.max(0.0) as usize) / TILE_SIZE).min(n - 1);
        for ty in tile(y_lo, tiles_y)..=tile(y_hi, tiles_y) {
            for tx in tile(x_lo, tiles_x)..=tile(x_hi, tiles_x) {
                bins[ty * tiles_x + tx].push(entry);
            }
        }
    }

    let tiles: Vec<TileOutput> = bins
        .par_iter()
        .enumerate()
        .map(|(t, bin)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width);
            let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height);
            let n = xs.len() * ys.len();
            let mut out = TileOutput {
                color: vec![0.0; n * 3],
                identity: vec![0.0; n * dim],
                final_t: vec![1.0; n],
                counts: vec![0; n],
                fragments: Vec::new(),
            };
            let mut local = 0;
            let mut row: Vec<&BinEntry> = Vec::with_capacity(bin.len());
            for y in ys {
                row.clear();
                row.extend(bin.iter().filter(|e| e.y.0 <= y as i32 && y as i32 <= e.y.1));
                for x in xs.clone() {
                    let px = pixel_center(x, y);
                    let color = &mut out.color[local * 3..local * 3 + 3];
                    let identity = &mut out.identity[local * dim..(local + 1) * dim];
                    let mut t = 1.0;
                    let mut count = 0;
                    for e in &row {
                        // cheap rejections that can never drop a fragment
                        if (x as i32) < e.x.0 || (x as i32) > e.x.1 {
                            continue;
                        }
                        let s = &splats[e.k as usize];
                        if s.mahalanobis_sq(&px) > e.m_max {
                            continue;
                        }
                        let g = &cloud.gaussians[s.source_index];
                        let alpha = pixel_alpha(s, g.opacity, &px);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        let w = alpha * t;
                        for c in 0..3 {
                            color[c] += g.color[c] * w;
                        }
                        for (acc, e) in identity.iter_mut().zip(&g.encoding) {
                            *acc += e * w;
                        }
                        out.fragments.push(Fragment {
                            source_index: s.source_index as u32,
                            alpha,
                            transmittance_before: t,
                        });
                        count += 1;
                        t *= 1.0 - alpha;
                    }
                    for c in 0..3 {
                        color[c] += t * background[c];
                    }
                    out.final_t[local] = t;
                    out.counts[local] = count;
                    local += 1;
                }
            }
            out
        })
        .collect();

    let pixels = width * height;
    let mut color = vec![0.0; pixels * 3];
    let mut identity = vec![0.0; pixels * dim];
    let mut final_transmittance = vec![1.0; pixels];
    let mut counts = vec![0usize; pixels];
    let mut starts = vec![(0usize, 0usize); pixels];
    for (t, tile) in tiles.iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width);
        let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height);
        let mut local = 0;
        let mut cursor = 0;
        for y in ys {
            for x in xs.clone() {
                let p = y * width + x;
                color[p * 3..p * 3 + 3].copy_from_slice(&tile.color[local * 3..local * 3 + 3]);
                identity[p * dim..(p + 1) * dim].copy_from_slice(&tile.identity[local * dim..(local + 1) * dim]);
                final_transmittance[p] = tile.final_t[local];
                counts[p] = tile.counts[local];
                starts[p] = (t, cursor);
                cursor += tile.counts[local];
                local += 1;
            }
        }
    }
    let mut offsets = Vec::with_capacity(pixels + 1);
    let mut fragments = Vec::with_capacity(tiles.iter().map(|t| t.fragments.len()).sum());
    offsets.push(0);
    for p in 0..pixels {
        let (t, start) = starts[p];
        fragments.extend_from_slice(&tiles[t].fragments[start..start + counts[p]]);
        offsets.push(fragments.len());
    }

    Ok(RenderOutput {
        width,
        height,
        encoding_dim: dim,
        background,
        color,
        identity,
        final_transmittance,
        offsets,
        fragments,
    })
}

/// Per-pixel accumulated compositing weight of each group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights {
    pub width: usize,
    pub height: usize,
    /// Sorted distinct group ids; column `k` of `weights` belongs to `groups[k]`.
    pub groups: Vec<u32>,
    /// `H × W × groups.len()`.
    pub weights: Vec<f64>,
}

impl GroupWeights {
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        let g = self.groups.len();
        &self.weights[pixel * g..(pixel + 1) * g]
    }

    /// Class mask: the group with the largest weight (lowest id on ties)
    /// when that weight exceeds `threshold`, background otherwise.
    pub fn to_mask(&self, threshold: f64) -> Result<Mask> {
        if let Some(&g) = self.groups.iter().find(|&&g| g > u8::MAX as u32) {
            return Err(Error::Invalid(format!("group id {g} does not fit an 8-bit mask")));
        }
        let mut mask = Mask::new(self.width, self.height);
        for (p, out) in mask.data.iter_mut().enumerate() {
            let w = self.pixel(p);
            if w.is_empty() {
                continue;
            }
            let best = crate::scene::argmax(w);
            if w[best] > threshold {
                *out = self.groups[best] as u8;
            }
        }
        Ok(mask)
    }
}

/// Sums fragment weights per group. Every Gaussian must have a group.
pub fn render_group_weights(cloud: &GaussianCloud, cam: &Camera) -> Result<GroupWeights> {
    if cloud.group_id.iter().any(|&g| g < 0) {
        return Err(Error::Invalid("cloud contains unassigned gaussians".into()));
    }
    let mut groups: Vec<u32> = cloud.group_id.iter().map(|&g| g as u32).collect();
    groups.sort_unstable();
    groups.dedup();
    let column: std::collections::HashMap<u32, usize> = groups.iter().enumerate().map(|(k, &g)| (g, k)).collect();
    let out = render(cloud, cam, [0.0; 3])?;
    let g = groups.len();
    let mut weights = vec![0.0; out.num_pixels() * g];
    for p in 0..out.num_pixels() {
        for f in out.pixel_fragments(p) {
            let k = column[&(cloud.group_id[f.source_index as usize] as u32)];
            weights[p * g + k] += f.weight();
        }
    }
    Ok(GroupWeights {
        width: out.width,
        height: out.height,
        groups,
        weights,
    })
}

/// Renders the identity map and classifies every pixel (argmax of logits).
pub fn segment(cloud: &GaussianCloud, head: &crate::head::ClassifierHead, cam: &Camera) -> Result<Mask> {
    let out = render(cloud, cam, [0.0; 3])?;
    let classes = head.predict(&out.identity);
    let mut mask = Mask::new(out.width, out.height);
    for (m, c) in mask.data.iter_mut().zip(classes) {
        *m = u8::try_from(c).map_err(|_| Error::Invalid(format!("class {c} does not fit an 8-bit mask")))?;
    }
    Ok(mask)
}

/// Convenience: color render as an image.
pub fn render_image(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> Result<RgbImage> {
    Ok(render(cloud, cam, background)?.color_image())
}
